"""Greedy and alignment-length synchronous beam decoding, offline and streaming.

Every search runs over a scorer that returns the K log-probabilities of the
joint output for a frame index and an emitted-token prefix. A hypothesis at
frame t holding u tokens may only emit a non-blank token when u <= t, so no
output is longer than the number of encoder frames.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from kd_tsasr.library import diffcore as dc
from kd_tsasr.library import transducer
from kd_tsasr.library.config import FeatureConfig

LOG = logging.getLogger("decode")

Tokens = Tuple[int, ...]
UNBOUNDED = np.iinfo(np.int64).max


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tokens
    log_prob: float
    # Next frame to consume; equals the frame count once the hypothesis is final.
    t: int = 0


class LatticeScorer:
    """Scores read from a fixed (T, U + 1, K) log-probability lattice indexed by prefix length.

    Prefixes longer than the lattice reuse its last label row.
    """

    def __init__(self, log_probs: np.ndarray):
        self._log_probs = np.asarray(log_probs, dtype=np.float64)

    @property
    def num_frames(self) -> int:
        return self._log_probs.shape[0]

    @property
    def vocab_size(self) -> int:
        return self._log_probs.shape[2]

    def log_probs(self, t: int, tokens: Tokens) -> np.ndarray:
        u = min(len(tokens), self._log_probs.shape[1] - 1)
        return self._log_probs[t, u]


class ModelScorer:
    """Joint outputs of a transducer, with prediction states cached per token prefix."""

    def __init__(self, model: transducer.TransducerModel, enc_states: Optional[np.ndarray] = None):
        self.model = model
        self._params = model.store.bind(track=False)
        self._enc_proj = np.zeros((0, model.config.joint_dim))
        self._pred_states: Dict[Tokens, dc.Var] = {(): transducer.start_state(model)}
        self._pred_proj: Dict[Tokens, dc.Var] = {}
        if enc_states is not None:
            self.extend(enc_states)

    @property
    def num_frames(self) -> int:
        return self._enc_proj.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.model.vocab_size

    def extend(self, enc_states: np.ndarray):
        """Append encoder frames (streaming)."""
        if len(enc_states) == 0:
            return
        proj = transducer.joint_encoder_projection(dc.constant(enc_states), self._params).data
        self._enc_proj = np.concatenate([self._enc_proj, proj])

    def _prediction(self, tokens: Tokens) -> dc.Var:
        proj = self._pred_proj.get(tokens)
        if proj is None:
            state = self._state(tokens)
            proj = transducer.joint_prediction_projection(state, self._params)
            self._pred_proj[tokens] = proj
        return proj

    def _state(self, tokens: Tokens) -> dc.Var:
        state = self._pred_states.get(tokens)
        if state is None:
            state = transducer.prediction_step(self._state(tokens[:-1]), tokens[-1], self._params)
            self._pred_states[tokens] = state
        return state

    def log_probs(self, t: int, tokens: Tokens) -> np.ndarray:
        enc = dc.constant(self._enc_proj[t])
        return transducer.joint_combine(enc, self._prediction(tokens), self._params).data


def _allowed(log_probs: np.ndarray, tokens: Tokens, t: int) -> Tuple[np.ndarray, bool]:
    """Log-probs with non-blank entries removed when the u <= t cap applies.

    The flag reports whether the cap suppressed a token that beat blank.
    """
    if len(tokens) <= t:
        return log_probs, False
    capped = np.full_like(log_probs, -np.inf)
    capped[transducer.BLANK] = log_probs[transducer.BLANK]
    return capped, bool(np.max(log_probs[1:]) > log_probs[transducer.BLANK])


def _log_cap(binds: int, where: str):
    if binds:
        LOG.info(f'{where}: token cap (u <= t) bound {binds} time(s)')


def greedy_search(scorer) -> Hypothesis:
    """Argmax path; blank advances t, ties go to the lowest token id."""
    tokens: Tokens = ()
    score = 0.0
    t = 0
    binds = 0
    while t < scorer.num_frames:
        log_probs, bound = _allowed(scorer.log_probs(t, tokens), tokens, t)
        binds += bound
        k = int(np.argmax(log_probs))
        score += float(log_probs[k])
        if k == transducer.BLANK:
            t += 1
        else:
            tokens = tokens + (k,)
    _log_cap(binds, 'greedy search')
    return Hypothesis(tokens=tokens, log_prob=score, t=t)


def _rank(hyp: Hypothesis):
    return (-hyp.log_prob, hyp.tokens)


class AlignmentSyncSearch:
    """Beam search over hypotheses of equal alignment length (frames + tokens).

    Expansions reaching the same token sequence are merged by log-sum-exp.
    The best ``beam`` expansions survive each step; those that consumed the
    last frame move to the final set. ``advance`` stops early when a live
    hypothesis needs a frame the scorer does not have yet.
    """

    def __init__(self, scorer, beam: int):
        if beam < 1:
            raise ValueError(f'Beam width must be >= 1, found {beam}')
        self.scorer = scorer
        self.beam = beam
        self.live: List[Hypothesis] = [Hypothesis(tokens=(), log_prob=0.0, t=0)]
        self.final: List[Hypothesis] = []
        self.cap_binds = 0

    @property
    def done(self) -> bool:
        return not self.live

    def step(self, total_frames: int):
        candidates: Dict[Tokens, Hypothesis] = {}
        for hyp in self.live:
            log_probs, bound = _allowed(self.scorer.log_probs(hyp.t, hyp.tokens), hyp.tokens, hyp.t)
            self.cap_binds += bound
            for k in np.flatnonzero(np.isfinite(log_probs)):
                k = int(k)
                if k == transducer.BLANK:
                    child = Hypothesis(hyp.tokens, hyp.log_prob + float(log_probs[k]), hyp.t + 1)
                else:
                    child = Hypothesis(hyp.tokens + (k,), hyp.log_prob + float(log_probs[k]), hyp.t)
                seen = candidates.get(child.tokens)
                if seen is not None:
                    child = Hypothesis(child.tokens, float(np.logaddexp(seen.log_prob,
                                                                        child.log_prob)), child.t)
                candidates[child.tokens] = child
        kept = sorted(candidates.values(), key=_rank)[:self.beam]
        self.live = [h for h in kept if h.t < total_frames]
        self.final.extend(h for h in kept if h.t >= total_frames)

    def advance(self, ready_frames: int, total_frames: Optional[int] = None):
        """Run steps while every live hypothesis has its next frame available."""
        total = ready_frames if total_frames is None else total_frames
        while self.live and max(h.t for h in self.live) < ready_frames:
            self.step(total)

    def best(self) -> Hypothesis:
        pool = self.final or self.live
        return sorted(pool, key=_rank)[0]

    def stable_prefix(self) -> Tokens:
        """Longest common token prefix of every live and final hypothesis."""
        pool = [h.tokens for h in self.live + self.final]
        prefix = pool[0]
        for tokens in pool[1:]:
            n = 0
            while n < min(len(prefix), len(tokens)) and prefix[n] == tokens[n]:
                n += 1
            prefix = prefix[:n]
        return prefix


def beam_search(scorer, beam: int) -> Hypothesis:
    search = AlignmentSyncSearch(scorer, beam)
    search.advance(scorer.num_frames)
    _log_cap(search.cap_binds, f'beam search (width {beam})')
    return search.best()


def greedy_decode(enc: transducer.EncodedSequence,
                  model: transducer.TransducerModel) -> Tokens:
    return greedy_search(ModelScorer(model, enc.states)).tokens


def beam_decode(enc: transducer.EncodedSequence, model: transducer.TransducerModel,
                beam: int = 8) -> Tokens:
    if beam < 1:
        raise ValueError(f'Beam width must be >= 1, found {beam}')
    return beam_search(ModelScorer(model, enc.states), beam).tokens


# Streaming.

class StreamSession:
    """Incremental decoding with a chunk-masked encoder.

    Feature frames are buffered. Each time a chunk of encoder frames
    completes, its states are computed from that chunk's allowed input window
    alone, so they do not depend on how frames were pushed or on any later
    frame. Emitted tokens are the stable prefix of the search and are never
    retracted.
    """

    def __init__(self, model: transducer.TransducerModel, conditioning=None, beam: int = 8):
        if model.streaming is None:
            raise ValueError('Streaming decoding needs a model with a streaming config')
        self.model = model
        self.conditioning = conditioning
        self.scorer = ModelScorer(model)
        self.search = AlignmentSyncSearch(self.scorer, beam)
        self.buffer = np.zeros((0, model.features.num_features))
        self.emitted: List[int] = []
        self.chunks_done = 0
        self.finished = False

    @property
    def _chunk_frames(self) -> int:
        return self.model.streaming.chunk * self.model.features.subsampling

    def _encode_next_chunk(self):
        features = transducer.FeatureSequence(self.buffer, self.model.features.window,
                                              self.model.features.hop)
        self.scorer.extend(transducer.encode_chunk(features, self.model, self.chunks_done,
                                                   self.conditioning))
        self.chunks_done += 1

    def _emit(self) -> List[int]:
        stable = self.search.stable_prefix() if not self.search.done else self.search.best().tokens
        new = list(stable[len(self.emitted):])
        self.emitted.extend(new)
        return new

    def push(self, frames: np.ndarray) -> List[int]:
        if self.finished:
            raise ValueError('Cannot push frames into a finished stream session')
        frames = np.asarray(frames, dtype=np.float64).reshape(-1, self.buffer.shape[1])
        self.buffer = np.concatenate([self.buffer, frames])
        while (self.chunks_done + 1) * self._chunk_frames <= len(self.buffer):
            self._encode_next_chunk()
            # The frame count is unknown until finish(), so nothing is final before then.
            self.search.advance(self.scorer.num_frames, total_frames=UNBOUNDED)
        return self._emit()

    def finish(self) -> List[int]:
        if self.finished:
            raise ValueError('Stream session already finished')
        self.finished = True
        if len(self.buffer) == 0:
            return []
        total = transducer.num_encoder_frames(len(self.buffer), self.model.features)
        while self.scorer.num_frames < total:
            self._encode_next_chunk()
        # Hypotheses may have advanced to the last frame without being finalized.
        self.search.final.extend(h for h in self.search.live if h.t >= total)
        self.search.live = [h for h in self.search.live if h.t < total]
        self.search.advance(total, total)
        _log_cap(self.search.cap_binds, 'streaming search')
        return self._emit()

    @property
    def tokens(self) -> Tokens:
        return tuple(self.emitted)


def stream_push(session: StreamSession, frames: transducer.FeatureSequence) -> List[int]:
    return session.push(frames.frames)


def algorithmic_latency_ms(features: FeatureConfig, chunk: int) -> float:
    """Half a chunk plus one analysis window, in milliseconds."""
    frame_ms = 1000.0 * features.hop * features.subsampling / features.sample_rate
    window_ms = 1000.0 * features.window / features.sample_rate
    return chunk * frame_ms / 2.0 + window_ms
