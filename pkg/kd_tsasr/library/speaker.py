"""Speaker encoder and the target-speaker transducer built on it."""
import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from kd_tsasr.library import diffcore as dc
from kd_tsasr.library import transducer
from kd_tsasr.library.config import FeatureConfig, ModelConfig, StreamingConfig

LOG = logging.getLogger("speaker")


@dataclass(frozen=True)
class SpeakerEmbedding:
    node: dc.Var

    @property
    def values(self) -> np.ndarray:
        return self.node.data


class TargetSpeakerModel:
    """Speaker encoder ("spk_enc") plus a conditioned transducer, in one store."""

    def __init__(self, asr: transducer.TransducerModel):
        if not asr.conditioned:
            raise ValueError('Target-speaker model needs a conditioned transducer')
        self.asr = asr

    @property
    def store(self) -> dc.ParamStore:
        return self.asr.store

    @property
    def features(self) -> FeatureConfig:
        return self.asr.features

    @property
    def vocab_size(self) -> int:
        return self.asr.vocab_size

    def with_streaming(self, streaming: Optional[StreamingConfig]) -> 'TargetSpeakerModel':
        return TargetSpeakerModel(self.asr.with_streaming(streaming))


def init_speaker_encoder(store: dc.ParamStore, rng: np.random.Generator, prefix: str,
                         input_dim: int, dim: int, out_dim: int, blocks: int, gain: float = 1.0):
    dc.add_affine(store, rng, f'{prefix}.input', input_dim, dim, gain)
    for i in range(blocks):
        transducer.init_encoder_block(store, rng, f'{prefix}.block{i}', dim, gain)
    dc.add_affine(store, rng, f'{prefix}.out', dim, out_dim, gain)


def speaker_encoder_graph(frames: np.ndarray, params: dc.ParamBinding, prefix: str,
                          blocks: int) -> dc.Var:
    """Per-frame network, time average, then a linear projection."""
    if frames.shape[0] == 0:
        raise ValueError('Enrollment has no frames')
    p = params.group(f'{prefix}.input')
    h = dc.affine(dc.constant(frames), p['W'], p['b'])
    mask = transducer.full_mask(h.shape[0])
    for i in range(blocks):
        h = transducer.encoder_block(h, mask, params, f'{prefix}.block{i}')
    p = params.group(f'{prefix}.out')
    return dc.affine(dc.mean(h, axis=0), p['W'], p['b'])


def init_target_speaker_model(seed: int, features: FeatureConfig, config: ModelConfig,
                              vocab_size: int,
                              streaming: Optional[StreamingConfig] = None) -> TargetSpeakerModel:
    rng = np.random.default_rng(seed)
    store = dc.ParamStore()
    transducer.init_transducer_params(store, rng, features, config, vocab_size)
    init_speaker_encoder(store, rng, 'spk_enc', features.num_features, config.enc_dim,
                         config.enc_dim, config.spk_blocks, config.init_scale)
    asr = transducer.TransducerModel(store, features, config, vocab_size, streaming,
                                     conditioned=True)
    return TargetSpeakerModel(asr)


def embed_speaker(enrollment: transducer.FeatureSequence, model: TargetSpeakerModel,
                  params: Optional[dc.ParamBinding] = None) -> SpeakerEmbedding:
    params = model.store.bind(track=False) if params is None else params
    node = speaker_encoder_graph(enrollment.frames, params, 'spk_enc', model.asr.config.spk_blocks)
    return SpeakerEmbedding(node)


def ts_lattice(record, model: TargetSpeakerModel,
               params: Optional[dc.ParamBinding] = None) -> transducer.PosteriorLattice:
    """Lattice of the record's transcript given its mixture and enrollment."""
    params = model.store.bind(track=False) if params is None else params
    embedding = embed_speaker(transducer.extract_features(record.enrollment, model.features),
                              model, params)
    enc = transducer.encode(transducer.extract_features(record.mixture, model.features),
                            model.asr, conditioning=embedding, params=params)
    pred = transducer.predict(record.transcript, model.asr, params)
    return transducer.joint_lattice(enc, pred, model.asr, params)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.dot(a, b) / denom) if denom > 0 else 0.0


@dataclass(frozen=True)
class SpeakerSeparation:
    same: float
    different: float

    @property
    def margin(self) -> float:
        return self.same - self.different


def speaker_separation(records: Sequence, model: TargetSpeakerModel) -> SpeakerSeparation:
    """Mean enrollment embedding cosine over same-speaker and different-speaker pairs.

    A side without any pair is reported as NaN.
    """
    embeddings = [embed_speaker(transducer.extract_features(r.enrollment, model.features),
                                model).values for r in records]
    same, different = [], []
    for i, j in itertools.combinations(range(len(records)), 2):
        pairs = same if records[i].target_speaker == records[j].target_speaker else different
        pairs.append(cosine_similarity(embeddings[i], embeddings[j]))
    separation = SpeakerSeparation(float(np.mean(same)) if same else float('nan'),
                                   float(np.mean(different)) if different else float('nan'))
    LOG.debug(f'Speaker cosine over {len(records)} enrollments: same {separation.same:.3f}, '
              f'different {separation.different:.3f}')
    return separation
