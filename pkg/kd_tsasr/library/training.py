"""Mini-batch training loop shared by every trainer in the package."""
import concurrent.futures
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from kd_tsasr.library import diffcore as dc
from kd_tsasr.library.config import worker_count
from kd_tsasr.library.errors import NumericFailure

LOG = logging.getLogger("training")

LOG_HEADER = 'epoch,split,rnnt_loss,kd_loss,total,ter'


@dataclass(frozen=True)
class PassResult:
    """Output of one forward/backward pass over a single item."""
    total: float
    # Named scalar loss terms for logging (e.g. rnnt, kd).
    terms: Dict[str, float]
    grads: Dict[str, np.ndarray]


# An objective maps (parameter leaves, item) to (scalar loss node, named terms).
Objective = Callable[[dc.ParamBinding, object], Tuple[dc.Var, Dict[str, float]]]


class MomentumSGD:
    """Plain SGD with heavy-ball momentum and optional global-norm clipping."""

    def __init__(self, learning_rate: float, momentum: float = 0.0, grad_clip: float = 0.0):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.grad_clip = grad_clip
        self._velocity: Dict[str, np.ndarray] = {}

    def step(self, store: dc.ParamStore):
        names = [n for n in store.names() if not store.is_frozen(n)]
        scale = 1.0
        if self.grad_clip > 0:
            norm = math.sqrt(sum(float(np.sum(store.grads[n] ** 2)) for n in names))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for name in names:
            g = store.grads[name] * scale
            v = self._velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self._velocity[name] = v
            store.params[name] -= self.learning_rate * v


@dataclass
class EpochRecord:
    epoch: int
    split: str
    rnnt_loss: float
    kd_loss: float
    total: float
    ter: float = float('nan')

    def csv_line(self) -> str:
        return (f'{self.epoch},{self.split},{self.rnnt_loss:.6f},{self.kd_loss:.6f},'
                f'{self.total:.6f},{self.ter:.4f}')


@dataclass
class FitHistory:
    # Mean batch loss of every optimizer step, in order.
    step_losses: List[float] = field(default_factory=list)
    epochs: List[EpochRecord] = field(default_factory=list)


def run_pass(store: dc.ParamStore, objective: Objective, item, item_id: str) -> PassResult:
    params = store.bind()
    loss, terms = objective(params, item)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericFailure(f'Non-finite loss {value} on item "{item_id}" (terms {terms})')
    dc.backward(loss)
    return PassResult(total=value, terms=terms, grads=params.grads())


def _item_id(item, index):
    return getattr(item, 'utt_id', str(index))


def fit(store: dc.ParamStore, items: Sequence, objective: Objective, epochs: int,
        batch_size: int, optimizer: MomentumSGD, seed: int, name: str = 'model',
        on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> FitHistory:
    """Train ``store`` in place over ``items``.

    Items of a batch are processed by a worker pool; their gradient
    dictionaries are merged in item order, so the result does not depend on
    the number of workers. The batch loss is the mean over items.
    """
    if not items:
        raise ValueError(f'Cannot train {name} on an empty dataset')
    LOG.info(f'Training {name}: {store.num_parameters()} parameters, {len(items)} items, '
             f'{epochs} epochs')
    rng = np.random.default_rng(seed)
    history = FitHistory()
    with concurrent.futures.ThreadPoolExecutor(max_workers=worker_count()) as executor:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(items))
            sums: Dict[str, float] = {}
            total_sum = 0.0
            for start in range(0, len(order), batch_size):
                batch = [items[i] for i in order[start:start + batch_size]]
                futures = [executor.submit(run_pass, store, objective, item, _item_id(item, i))
                           for i, item in zip(order[start:start + batch_size], batch)]
                try:
                    results = [f.result() for f in futures]
                except NumericFailure as e:
                    raise NumericFailure(f'{name}, epoch {epoch}: {e}')
                store.zero_grad()
                weight = 1.0 / len(results)
                for result in results:
                    store.accumulate(result.grads, weight)
                optimizer.step(store)
                history.step_losses.append(sum(r.total for r in results) * weight)
                for result in results:
                    total_sum += result.total
                    for key, value in result.terms.items():
                        sums[key] = sums.get(key, 0.0) + value
            n = float(len(items))
            record = EpochRecord(epoch=epoch, split='train', rnnt_loss=sums.get('rnnt', 0.0) / n,
                                 kd_loss=sums.get('kd', 0.0) / n, total=total_sum / n)
            if on_epoch is not None:
                on_epoch(record)
            history.epochs.append(record)
            LOG.info(f'{name} epoch {epoch}/{epochs}: total {record.total:.4f} '
                     f'(rnnt {record.rnnt_loss:.4f}, kd {record.kd_loss:.4f})')
    return history


def write_training_log(path: str, records: Sequence[EpochRecord]):
    with open(path, 'w') as f:
        f.write(LOG_HEADER + '\n')
        for record in records:
            f.write(record.csv_line() + '\n')
