"""Single-talker neural transducer.

Pipeline: unlearned features -> attention encoder (optionally chunk masked)
-> gated-recurrence prediction network -> additive joint -> posterior
lattice of shape (T, U + 1, K), stored as log-probabilities. Blank is id 0.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from kd_tsasr.library import diffcore as dc
from kd_tsasr.library.config import FeatureConfig, ModelConfig, StreamingConfig

LOG = logging.getLogger("transducer")

BLANK = 0


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    window: int
    hop: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class EncodedSequence:
    node: dc.Var
    subsampling: int = 1

    @property
    def states(self) -> np.ndarray:
        return self.node.data

    @property
    def num_frames(self) -> int:
        return self.node.shape[0]


@dataclass(frozen=True)
class PosteriorLattice:
    """Per-(t, u) output distributions; ``node`` holds the log-probabilities."""
    node: dc.Var

    @classmethod
    def from_log_probs(cls, log_probs: np.ndarray) -> 'PosteriorLattice':
        return cls(dc.constant(log_probs))

    @property
    def log_probs(self) -> np.ndarray:
        return self.node.data

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.node.data)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.node.shape


def dct_basis(size: int, count: int) -> np.ndarray:
    """Rows of the orthonormal DCT-II basis of length ``size``; shape (count, size)."""
    if count > size:
        raise ValueError(f'Cannot take {count} DCT coefficients from a window of {size}')
    n = np.arange(size)
    k = np.arange(count)[:, None]
    basis = np.cos(np.pi * (n + 0.5) * k / size) * np.sqrt(2.0 / size)
    basis[0] /= np.sqrt(2.0)
    return basis


def frame_signal(signal: np.ndarray, window: int, hop: int) -> np.ndarray:
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1 or len(signal) < window:
        raise ValueError(f'Signal of length {len(signal)} is shorter than the window ({window})')
    return sliding_window_view(signal, window)[::hop]


def extract_features(signal: np.ndarray, config: FeatureConfig) -> FeatureSequence:
    """Frame the signal, normalize each frame to unit RMS and project on a fixed DCT basis."""
    frames = frame_signal(signal, config.window, config.hop)
    rms = np.sqrt(np.mean(frames * frames, axis=1, keepdims=True))
    normalized = np.where(rms > 0, frames / np.where(rms > 0, rms, 1.0), 0.0)
    features = normalized @ dct_basis(config.window, config.num_features).T
    return FeatureSequence(frames=features, window=config.window, hop=config.hop)


def build_chunk_mask(T: int, chunk: int, history: int) -> np.ndarray:
    """Frame t of chunk c sees [max(0, c*chunk - history), min(T, (c+1)*chunk) - 1]."""
    if chunk < 1 or history < 0:
        raise ValueError(f'Chunk mask needs chunk >= 1 and history >= 0, found {chunk}, {history}')
    t = np.arange(T)
    c = t // chunk
    low = np.maximum(0, c * chunk - history)
    high = np.minimum(T, (c + 1) * chunk) - 1
    j = np.arange(T)[None, :]
    return (j >= low[:, None]) & (j <= high[:, None])


def full_mask(T: int) -> np.ndarray:
    return np.ones((T, T), dtype=bool)


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


# Encoder blocks shared with the speaker encoder and the extractor.

def init_encoder_block(store: dc.ParamStore, rng: np.random.Generator, prefix: str,
                       dim: int, gain: float = 1.0):
    dc.add_attention(store, rng, f'{prefix}.attn', dim, gain)
    dc.add_affine(store, rng, f'{prefix}.ff', dim, dim, gain)


def encoder_block(h: dc.Var, mask: np.ndarray, params: dc.ParamBinding, prefix: str) -> dc.Var:
    h = dc.add(h, dc.masked_self_attention(h, mask, params.group(f'{prefix}.attn')))
    ff = params.group(f'{prefix}.ff')
    return dc.add(h, dc.tanh(dc.affine(h, ff['W'], ff['b'])))


class TransducerModel:
    """Encoder ("asr_enc"), prediction ("pred") and joint ("joint") parameter groups."""

    def __init__(self, store: dc.ParamStore, features: FeatureConfig, config: ModelConfig,
                 vocab_size: int, streaming: Optional[StreamingConfig] = None,
                 conditioned: bool = False):
        if vocab_size < 2:
            raise ValueError(f'Vocabulary size must be >= 2, found {vocab_size}')
        if streaming is not None and (streaming.chunk < 1 or streaming.history < 0):
            raise ValueError(f'Invalid streaming config {streaming}')
        self.store = store
        self.features = features
        self.config = config
        self.vocab_size = vocab_size
        self.streaming = streaming
        self.conditioned = conditioned

    def with_streaming(self, streaming: Optional[StreamingConfig]) -> 'TransducerModel':
        return TransducerModel(self.store, self.features, self.config, self.vocab_size,
                               streaming, self.conditioned)


def init_transducer_params(store: dc.ParamStore, rng: np.random.Generator,
                           features: FeatureConfig, config: ModelConfig, vocab_size: int):
    gain = config.init_scale
    dc.add_affine(store, rng, 'asr_enc.input', features.num_features, config.enc_dim, gain)
    for i in range(config.enc_blocks):
        init_encoder_block(store, rng, f'asr_enc.block{i}', config.enc_dim, gain)
    store.add('pred.embed', dc.init_matrix(rng, vocab_size, config.pred_dim, gain))
    dc.add_recurrence(store, rng, 'pred.rnn', config.pred_dim, config.pred_dim, gain)
    dc.add_affine(store, rng, 'joint.enc', config.enc_dim, config.joint_dim, gain)
    dc.add_affine(store, rng, 'joint.pred', config.pred_dim, config.joint_dim, gain)
    dc.add_affine(store, rng, 'joint.out', config.joint_dim, vocab_size, gain)


def init_transducer(seed: int, features: FeatureConfig, config: ModelConfig, vocab_size: int,
                    streaming: Optional[StreamingConfig] = None) -> TransducerModel:
    store = dc.ParamStore()
    init_transducer_params(store, np.random.default_rng(seed), features, config, vocab_size)
    return TransducerModel(store, features, config, vocab_size, streaming)


def _bind(model, params: Optional[dc.ParamBinding]) -> dc.ParamBinding:
    return model.store.bind(track=False) if params is None else params


def _conditioning_node(conditioning) -> dc.Var:
    # SpeakerEmbedding, graph node or raw vector.
    node = getattr(conditioning, 'node', conditioning)
    return node if isinstance(node, dc.Var) else dc.constant(node)


def encoder_input(frames: np.ndarray, model: TransducerModel, params: dc.ParamBinding) -> dc.Var:
    x = dc.constant(frames[::model.features.subsampling])
    enc = params.group('asr_enc.input')
    return dc.affine(x, enc['W'], enc['b'])


def encoder_blocks(h: dc.Var, mask: np.ndarray, model: TransducerModel, params: dc.ParamBinding,
                   conditioning=None) -> dc.Var:
    for i in range(model.config.enc_blocks):
        h = encoder_block(h, mask, params, f'asr_enc.block{i}')
        if i == 0 and conditioning is not None:
            c = _conditioning_node(conditioning)
            if c.shape != (h.shape[1],):
                raise ValueError(f'Conditioning of shape {c.shape} does not match '
                                 f'block output width {h.shape[1]}')
            h = dc.mul(h, c)
    return h


def chunk_window(T: int, streaming: StreamingConfig, index: int) -> Tuple[int, int, int]:
    """(first input frame, first output frame, end) of chunk ``index``."""
    start = index * streaming.chunk
    if not 0 <= start < T:
        raise ValueError(f'Chunk {index} lies outside a sequence of {T} frames')
    return max(0, start - streaming.history), start, min(T, start + streaming.chunk)


def chunk_graph(h: dc.Var, index: int, model: TransducerModel, params: dc.ParamBinding,
                conditioning=None) -> dc.Var:
    """States of chunk ``index`` computed from its allowed input window only.

    Every block runs on the window alone, so stacking blocks never reaches
    further back than ``history`` frames before the chunk.
    """
    T = h.shape[0]
    low, start, stop = chunk_window(T, model.streaming, index)
    mask = build_chunk_mask(T, model.streaming.chunk, model.streaming.history)[low:stop, low:stop]
    out = encoder_blocks(dc.narrow(h, low, stop), mask, model, params, conditioning)
    return dc.narrow(out, start - low, stop - low)


def _check_conditioning(model: TransducerModel, conditioning):
    if model.conditioned and conditioning is None:
        raise ValueError('Target-speaker encoder requires a conditioning embedding')
    if not model.conditioned and conditioning is not None:
        raise ValueError('Unconditioned encoder does not accept a conditioning embedding')


def encoder_graph(frames: np.ndarray, model: TransducerModel, params: dc.ParamBinding,
                  conditioning=None) -> dc.Var:
    _check_conditioning(model, conditioning)
    h = encoder_input(frames, model, params)
    T = h.shape[0]
    if model.streaming is None or T == 0:
        return encoder_blocks(h, full_mask(T), model, params, conditioning)
    num_chunks = -(-T // model.streaming.chunk)
    return dc.concat([chunk_graph(h, c, model, params, conditioning) for c in range(num_chunks)])


def encode(features: FeatureSequence, model: TransducerModel, conditioning=None,
           params: Optional[dc.ParamBinding] = None) -> EncodedSequence:
    node = encoder_graph(features.frames, model, _bind(model, params), conditioning)
    return EncodedSequence(node=node, subsampling=model.features.subsampling)


def encode_chunk(features: FeatureSequence, model: TransducerModel, index: int,
                 conditioning=None) -> np.ndarray:
    """States of one streaming chunk; frames past the end of the chunk are never read."""
    if model.streaming is None:
        raise ValueError('Chunk encoding needs a model with a streaming config')
    _check_conditioning(model, conditioning)
    params = _bind(model, None)
    end = (index + 1) * model.streaming.chunk * model.features.subsampling
    h = encoder_input(features.frames[:end], model, params)
    return chunk_graph(h, index, model, params, conditioning).data


def validate_transcript(tokens: Sequence[int], vocab_size: int):
    for token in tokens:
        if token == BLANK:
            raise ValueError('Blank (0) is not allowed inside a transcript')
        if not 1 <= token <= vocab_size - 1:
            raise ValueError(f'Token id {token} outside [1, {vocab_size - 1}]')


def start_state(model: TransducerModel) -> dc.Var:
    return dc.constant(np.zeros(model.config.pred_dim))


def prediction_step(h_prev: dc.Var, token: int, params: dc.ParamBinding) -> dc.Var:
    embedding = dc.take(params['pred.embed'], int(token))
    return dc.recurrent_step(h_prev, embedding, params.group('pred.rnn'))


def predict(tokens: Sequence[int], model: TransducerModel,
            params: Optional[dc.ParamBinding] = None) -> dc.Var:
    """Prediction states [h0, ..., hU] as a (U + 1, D_pred) node; row u sees tokens[:u]."""
    validate_transcript(tokens, model.vocab_size)
    params = _bind(model, params)
    states = [start_state(model)]
    for token in tokens:
        states.append(prediction_step(states[-1], token, params))
    return dc.stack(states)


def joint_encoder_projection(enc: dc.Var, params: dc.ParamBinding) -> dc.Var:
    p = params.group('joint.enc')
    return dc.affine(enc, p['W'], p['b'])


def joint_prediction_projection(pred: dc.Var, params: dc.ParamBinding) -> dc.Var:
    p = params.group('joint.pred')
    return dc.affine(pred, p['W'], p['b'])


def joint_combine(enc_proj: dc.Var, pred_proj: dc.Var, params: dc.ParamBinding) -> dc.Var:
    """log softmax(W_out tanh(enc_proj + pred_proj) + b_out), broadcasting the inputs."""
    p = params.group('joint.out')
    z = dc.tanh(dc.add(enc_proj, pred_proj))
    return dc.log_softmax_last_dim(dc.affine(z, p['W'], p['b']))


def joint_lattice(enc: EncodedSequence, pred: dc.Var, model: TransducerModel,
                  params: Optional[dc.ParamBinding] = None) -> PosteriorLattice:
    params = _bind(model, params)
    if pred.data.ndim != 2 or enc.states.ndim != 2:
        raise ValueError(f'Joint expects 2-D inputs, found {enc.states.shape} and {pred.shape}')
    je = joint_encoder_projection(enc.node, params)
    jp = joint_prediction_projection(pred, params)
    T, J = je.shape
    U1 = jp.shape[0]
    log_probs = joint_combine(dc.reshape(je, (T, 1, J)), dc.reshape(jp, (1, U1, J)), params)
    return PosteriorLattice(log_probs)


def transducer_lattice(signal: np.ndarray, transcript: Sequence[int], model: TransducerModel,
                       params: Optional[dc.ParamBinding] = None) -> PosteriorLattice:
    params = _bind(model, params)
    enc = encode(extract_features(signal, model.features), model, params=params)
    return joint_lattice(enc, predict(transcript, model, params), model, params)


# Loss.

def _label_log_probs(log_probs: np.ndarray, transcript: Sequence[int]):
    T, U1, _ = log_probs.shape
    U = U1 - 1
    if T == 0:
        raise ValueError('RNNT loss needs at least one frame')
    if len(transcript) != U:
        raise ValueError(f'Transcript length {len(transcript)} does not match lattice U = {U}')
    blank = log_probs[:, :, BLANK]
    labels = np.zeros((T, U))
    for u, token in enumerate(transcript):
        labels[:, u] = log_probs[:, u, token]
    return blank, labels


def forward_variables(blank: np.ndarray, labels: np.ndarray) -> np.ndarray:
    T, U1 = blank.shape
    alpha = np.full((T, U1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            a = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else -np.inf
            if u > 0:
                a = np.logaddexp(a, alpha[t, u - 1] + labels[t, u - 1])
            alpha[t, u] = a
    return alpha


def backward_variables(blank: np.ndarray, labels: np.ndarray) -> np.ndarray:
    T, U1 = blank.shape
    beta = np.full((T, U1), -np.inf)
    beta[T - 1, U1 - 1] = blank[T - 1, U1 - 1]
    for t in range(T - 1, -1, -1):
        for u in range(U1 - 1, -1, -1):
            if t == T - 1 and u == U1 - 1:
                continue
            b = beta[t + 1, u] + blank[t, u] if t < T - 1 else -np.inf
            if u < U1 - 1:
                b = np.logaddexp(b, beta[t, u + 1] + labels[t, u])
            beta[t, u] = b
    return beta


def rnnt_loss(lattice: PosteriorLattice, transcript: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Negative log-likelihood over all alignments and its gradient w.r.t. the log-probs."""
    log_probs = lattice.log_probs
    blank, labels = _label_log_probs(log_probs, transcript)
    T, U1 = blank.shape
    alpha = forward_variables(blank, labels)
    beta = backward_variables(blank, labels)
    log_likelihood = alpha[T - 1, U1 - 1] + blank[T - 1, U1 - 1]

    grad = np.zeros_like(log_probs)
    grad_blank = np.zeros((T, U1))
    grad_blank[:T - 1] = -np.exp(alpha[:T - 1] + blank[:T - 1] + beta[1:] - log_likelihood)
    grad_blank[T - 1, U1 - 1] = -np.exp(alpha[T - 1, U1 - 1] + blank[T - 1, U1 - 1]
                                        - log_likelihood)
    grad[:, :, BLANK] = grad_blank
    for u, token in enumerate(transcript):
        grad[:, u, token] += -np.exp(alpha[:, u] + labels[:, u] + beta[:, u + 1] - log_likelihood)
    return float(-log_likelihood), grad


def rnnt_loss_node(lattice: PosteriorLattice, transcript: Sequence[int]) -> dc.Var:
    loss, grad = rnnt_loss(lattice, transcript)
    return dc.scalar_op(loss, lattice.node, grad)


# Offline to streaming initialization.

def init_streaming_from_offline(offline: dc.ParamStore, target: dc.ParamStore) -> List[str]:
    """Copy every parameter of ``offline`` into ``target``; returns the copied names.

    Names only present in ``target`` keep their fresh values.
    """
    manifest = []
    for name in offline.names():
        if name not in target.params:
            continue
        if offline.params[name].shape != target.params[name].shape:
            raise ValueError(f'Parameter "{name}" has shape {offline.params[name].shape} offline '
                             f'but {target.params[name].shape} in the streaming model')
        target.params[name][...] = offline.params[name]
        manifest.append(name)
    fresh = [n for n in target.names() if n not in offline.params]
    LOG.info(f'Initialized {len(manifest)} parameters from the offline model, '
             f'{len(fresh)} left fresh')
    for name in manifest:
        LOG.debug(f'  copied {name}')
    return manifest


def num_encoder_frames(num_feature_frames: int, features: FeatureConfig) -> int:
    s = features.subsampling
    return (num_feature_frames + s - 1) // s
