"""Teacher pretraining and knowledge-distilled target-speaker student training.

Step one trains a single-talker transducer (the teacher) on
``target_plus_noise``. Step two freezes it and trains the target-speaker
student on mixtures with

    L = L_rnnt(student) + lambda * L_kd(teacher, student)

where L_kd is the cross-entropy between the full teacher and student
lattices, blank and all U + 1 label rows included, temperature 1, no
normalization by lattice size.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from kd_tsasr.library import corpus
from kd_tsasr.library import diffcore as dc
from kd_tsasr.library import decode
from kd_tsasr.library import scoring
from kd_tsasr.library import speaker
from kd_tsasr.library import training
from kd_tsasr.library import transducer
from kd_tsasr.library.config import ExperimentConfig, StreamingConfig

LOG = logging.getLogger("distill")


@dataclass(frozen=True)
class KDConfig:
    lam: float = 0.0
    teacher_checkpoint: Optional[str] = None
    epochs: int = 10
    learning_rate: float = 0.02
    momentum: float = 0.9
    grad_clip: float = 5.0
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f'lambda must be >= 0, found {self.lam}')

    @classmethod
    def from_experiment(cls, config: ExperimentConfig, lam: float, seed: int,
                        epochs: Optional[int] = None,
                        teacher_checkpoint: Optional[str] = None) -> 'KDConfig':
        train = config.train
        return cls(lam=lam, teacher_checkpoint=teacher_checkpoint,
                   epochs=train.epochs if epochs is None else epochs,
                   learning_rate=train.learning_rate, momentum=train.momentum,
                   grad_clip=train.grad_clip, batch_size=train.batch_size, seed=seed)


@dataclass(frozen=True)
class MultitaskTerms:
    total: dc.Var
    rnnt: float
    kd: float


def kd_loss(teacher: transducer.PosteriorLattice,
            student: transducer.PosteriorLattice) -> Tuple[float, np.ndarray]:
    """Cross-entropy of the student lattice under the teacher lattice.

    Returns the loss and its gradient w.r.t. the student probabilities
    (-teacher / student); the teacher is a constant.
    """
    if teacher.shape != student.shape:
        raise ValueError(f'Teacher lattice {teacher.shape} and student lattice {student.shape} '
                         f'differ; front ends or subsampling are inconsistent')
    p = teacher.probs
    loss = float(-np.sum(p * student.log_probs))
    return loss, -p / student.probs


def kd_loss_node(teacher: transducer.PosteriorLattice,
                 student: transducer.PosteriorLattice) -> dc.Var:
    loss, _ = kd_loss(teacher, student)
    # d loss / d log q = -p
    return dc.scalar_op(loss, student.node, -teacher.probs)


def lattice_entropy(lattice: transducer.PosteriorLattice) -> float:
    return float(-np.sum(lattice.probs * lattice.log_probs))


def teacher_lattice(record, teacher: transducer.TransducerModel) -> transducer.PosteriorLattice:
    """Teacher posteriors on the single-talker signal of ``record``; no graph is built."""
    return transducer.transducer_lattice(record.target_plus_noise, record.transcript, teacher,
                                         teacher.store.bind(track=False))


def check_teacher(teacher: transducer.TransducerModel):
    if not teacher.store.fully_frozen:
        raise ValueError('Teacher parameters must be frozen before distillation')


def multitask_objective(record, student: speaker.TargetSpeakerModel,
                        teacher: transducer.TransducerModel, lam: float,
                        params: Optional[dc.ParamBinding] = None) -> MultitaskTerms:
    check_teacher(teacher)
    if lam < 0:
        raise ValueError(f'lambda must be >= 0, found {lam}')
    student_lattice = speaker.ts_lattice(record, student, params)
    rnnt = transducer.rnnt_loss_node(student_lattice, record.transcript)
    soft = teacher_lattice(record, teacher)
    kd = kd_loss_node(soft, student_lattice)
    total = rnnt if lam == 0 else dc.add(rnnt, dc.scale(kd, lam))
    return MultitaskTerms(total=total, rnnt=float(rnnt.data), kd=float(kd.data))


def multitask_loss(record, student: speaker.TargetSpeakerModel,
                   teacher: transducer.TransducerModel, lam: float) -> float:
    return float(multitask_objective(record, student, teacher, lam).total.data)


# Evaluation helpers used for per-epoch dev TER.

def ter_of(hyps: Dict[str, Sequence[int]], records: Sequence) -> float:
    refs = {r.utt_id: r.transcript for r in records}
    return scoring.score_split(hyps, refs, {r.utt_id: None for r in records}).average


def transcribe_single_talker(records: Sequence, model: transducer.TransducerModel,
                             beam: int = 1) -> Dict[str, Tuple[int, ...]]:
    out = {}
    for r in records:
        enc = transducer.encode(transducer.extract_features(r.target_plus_noise, model.features),
                                model)
        out[r.utt_id] = decode.beam_decode(enc, model, beam)
    return out


def transcribe_mixtures(records: Sequence, model: speaker.TargetSpeakerModel,
                        beam: int = 1) -> Dict[str, Tuple[int, ...]]:
    out = {}
    for r in records:
        embedding = speaker.embed_speaker(
            transducer.extract_features(r.enrollment, model.features), model)
        enc = transducer.encode(transducer.extract_features(r.mixture, model.features),
                                model.asr, conditioning=embedding)
        out[r.utt_id] = decode.beam_decode(enc, model.asr, beam)
    return out


def _dev_logger(name: str, dev_records: Sequence,
                transcribe: Callable[[Sequence], Dict[str, Tuple[int, ...]]]):
    def on_epoch(record: training.EpochRecord):
        if dev_records:
            record.ter = ter_of(transcribe(dev_records), dev_records)
            LOG.info(f'{name} epoch {record.epoch}: dev TER {record.ter:.2f}')
    return on_epoch


# Trainers.

def train_teacher(records: Sequence, config: ExperimentConfig, seed: int,
                  streaming: Optional[StreamingConfig] = None,
                  init_from: Optional[transducer.TransducerModel] = None,
                  epochs: Optional[int] = None, dev_records: Sequence = (),
                  ) -> Tuple[transducer.TransducerModel, training.FitHistory]:
    """Train the single-talker transducer on (target_plus_noise, transcript) pairs only."""
    if not records:
        raise ValueError('Teacher training needs a non-empty dataset')
    model = transducer.init_transducer(seed, config.features, config.model,
                                       config.corpus.vocab_size, streaming)
    if init_from is not None:
        transducer.init_streaming_from_offline(init_from.store, model.store)
    pairs = list(corpus.single_talker_pairs(records))

    def objective(params, pair):
        lattice = transducer.transducer_lattice(pair.signal, pair.transcript, model, params)
        loss = transducer.rnnt_loss_node(lattice, pair.transcript)
        return loss, {'rnnt': float(loss.data)}

    name = 'teacher' if streaming is None else 'streaming teacher'
    train = config.train
    history = training.fit(
        model.store, pairs, objective,
        epochs=train.epochs if epochs is None else epochs, batch_size=train.batch_size,
        optimizer=training.MomentumSGD(train.learning_rate, train.momentum, train.grad_clip),
        seed=seed, name=name,
        on_epoch=_dev_logger(name, dev_records,
                             lambda rs: transcribe_single_talker(rs, model)))
    return model, history


def _student_model(config: ExperimentConfig, seed: int, streaming: Optional[StreamingConfig],
                   init_from: Optional[speaker.TargetSpeakerModel]) -> speaker.TargetSpeakerModel:
    model = speaker.init_target_speaker_model(seed, config.features, config.model,
                                              config.corpus.vocab_size, streaming)
    if init_from is not None:
        transducer.init_streaming_from_offline(init_from.store, model.store)
    return model


def train_student(records: Sequence, teacher: transducer.TransducerModel, kd: KDConfig,
                  config: ExperimentConfig, streaming: Optional[StreamingConfig] = None,
                  init_from: Optional[speaker.TargetSpeakerModel] = None,
                  dev_records: Sequence = (),
                  ) -> Tuple[speaker.TargetSpeakerModel, training.FitHistory]:
    """Optimize the multi-task loss of a target-speaker student against a frozen teacher."""
    check_teacher(teacher)
    model = _student_model(config, kd.seed, streaming, init_from)

    def objective(params, record):
        terms = multitask_objective(record, model, teacher, kd.lam, params)
        return terms.total, {'rnnt': terms.rnnt, 'kd': terms.kd}

    name = f'student lambda={kd.lam:g}' + (' streaming' if streaming else '')
    history = training.fit(
        model.store, list(records), objective, epochs=kd.epochs, batch_size=kd.batch_size,
        optimizer=training.MomentumSGD(kd.learning_rate, kd.momentum, kd.grad_clip),
        seed=kd.seed, name=name,
        on_epoch=_dev_logger(name, dev_records, lambda rs: transcribe_mixtures(rs, model)))
    return model, history


def train_ts_baseline(records: Sequence, kd: KDConfig, config: ExperimentConfig,
                      streaming: Optional[StreamingConfig] = None,
                      init_from: Optional[speaker.TargetSpeakerModel] = None,
                      ) -> Tuple[speaker.TargetSpeakerModel, training.FitHistory]:
    """Target-speaker transducer trained with the RNNT loss alone, no teacher involved."""
    model = _student_model(config, kd.seed, streaming, init_from)

    def objective(params, record):
        loss = transducer.rnnt_loss_node(speaker.ts_lattice(record, model, params),
                                         record.transcript)
        return loss, {'rnnt': float(loss.data)}

    history = training.fit(
        model.store, list(records), objective, epochs=kd.epochs, batch_size=kd.batch_size,
        optimizer=training.MomentumSGD(kd.learning_rate, kd.momentum, kd.grad_clip),
        seed=kd.seed, name='ts baseline')
    return model, history


def select_best_lambda(dev_ters: Dict[float, float]) -> float:
    """Lowest dev TER wins; ties go to the larger lambda."""
    if not dev_ters:
        raise ValueError('No lambda candidates to select from')
    return min(dev_ters, key=lambda lam: (dev_ters[lam], -lam))
