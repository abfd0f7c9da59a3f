"""Target speech extraction front end for the cascade baseline.

The mixture is cut into half-overlapping frames and moved to an orthonormal
DCT domain. A small attention network predicts a sigmoid mask over the
coefficients; its first block output is multiplied elementwise by a speaker
embedding computed from the enrollment. Masked frames go back to the time
domain by the inverse DCT and a normalized overlap-add.

Training maximizes SI-SNR against ``target_clean``. The extractor is never
trained jointly with the recognizer.
"""
import logging
import math
from typing import Callable, Dict, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from kd_tsasr.library import decode
from kd_tsasr.library import diffcore as dc
from kd_tsasr.library import speaker
from kd_tsasr.library import training
from kd_tsasr.library import transducer
from kd_tsasr.library.config import ExperimentConfig, ExtractorConfig

LOG = logging.getLogger("tse")

SI_SNR_CAP_DB = 60.0
SI_SNR_EPS = 1e-8


class ExtractorModel:
    """Speaker encoder ("tse_spk") and mask network ("tse_se")."""

    def __init__(self, store: dc.ParamStore, config: ExtractorConfig, causal: bool = False):
        if config.hop < 1 or config.hop > config.window:
            raise ValueError(f'Extractor hop must be in [1, window], found {config.hop}')
        self.store = store
        self.config = config
        self.causal = causal


def init_extractor(seed: int, config: ExtractorConfig, causal: bool = False) -> ExtractorModel:
    rng = np.random.default_rng(seed)
    store = dc.ParamStore()
    speaker.init_speaker_encoder(store, rng, 'tse_spk', config.window, config.dim, config.dim,
                                 config.spk_blocks)
    dc.add_affine(store, rng, 'tse_se.input', config.window, config.dim)
    for i in range(config.blocks):
        transducer.init_encoder_block(store, rng, f'tse_se.block{i}', config.dim)
    dc.add_affine(store, rng, 'tse_se.out', config.dim, config.window)
    return ExtractorModel(store, config, causal)


def padded_frames(signal: np.ndarray, window: int, hop: int) -> Tuple[np.ndarray, int]:
    """Frames covering the whole signal, zero-padded at the end; returns (frames, padded length)."""
    signal = np.asarray(signal, dtype=np.float64)
    if len(signal) == 0:
        raise ValueError('Cannot extract from an empty signal')
    n = 1 if len(signal) <= window else math.ceil((len(signal) - window) / hop) + 1
    length = (n - 1) * hop + window
    padded = np.concatenate([signal, np.zeros(length - len(signal))])
    return sliding_window_view(padded, window)[::hop], length


def frame_features(frames: np.ndarray, basis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """DCT coefficients and their log-compressed, level-normalized magnitudes."""
    coefficients = frames @ basis.T
    rms = np.sqrt(np.mean(frames * frames, axis=1, keepdims=True))
    level = np.where(rms > 0, rms, 1.0)
    features = np.where(rms > 0, np.log1p(np.abs(coefficients) / level), 0.0)
    return coefficients, features


def extractor_embedding(enrollment: np.ndarray, model: ExtractorModel,
                        params: dc.ParamBinding) -> dc.Var:
    cfg = model.config
    frames, _ = padded_frames(enrollment, cfg.window, cfg.hop)
    _, features = frame_features(frames, transducer.dct_basis(cfg.window, cfg.window))
    return speaker.speaker_encoder_graph(features, params, 'tse_spk', cfg.spk_blocks)


def extraction_graph(mixture: np.ndarray, enrollment: np.ndarray, model: ExtractorModel,
                     params: dc.ParamBinding, mask_override=None) -> dc.Var:
    cfg = model.config
    mixture = np.asarray(mixture, dtype=np.float64)
    if len(enrollment) == 0:
        raise ValueError('Cannot extract without an enrollment signal')
    frames, length = padded_frames(mixture, cfg.window, cfg.hop)
    basis = transducer.dct_basis(cfg.window, cfg.window)
    coefficients, features = frame_features(frames, basis)

    if mask_override is not None:
        mask = dc.constant(np.broadcast_to(mask_override, coefficients.shape))
    else:
        embedding = extractor_embedding(enrollment, model, params)
        p = params.group('tse_se.input')
        h = dc.affine(dc.constant(features), p['W'], p['b'])
        n = h.shape[0]
        attention = transducer.causal_mask(n) if model.causal else transducer.full_mask(n)
        for i in range(cfg.blocks):
            h = transducer.encoder_block(h, attention, params, f'tse_se.block{i}')
            if i == 0:
                h = dc.mul(h, embedding)
        p = params.group('tse_se.out')
        mask = dc.sigmoid(dc.affine(h, p['W'], p['b']))

    masked = dc.mul(mask, dc.constant(coefficients))
    restored = dc.matmul(masked, dc.constant(basis))
    counts = np.zeros(length)
    np.add.at(counts, np.arange(cfg.window)[None, :] + cfg.hop * np.arange(len(frames))[:, None],
              1.0)
    summed = dc.overlap_add(restored, cfg.hop, length)
    return dc.narrow(dc.mul(summed, dc.constant(1.0 / counts)), 0, len(mixture))


def extract_target(mixture: np.ndarray, enrollment: np.ndarray, model: ExtractorModel,
                   mask_override=None) -> np.ndarray:
    """Estimated target signal, same length as ``mixture``.

    ``mask_override`` replaces the predicted mask (e.g. 1.0 for identity).
    """
    params = model.store.bind(track=False)
    return extraction_graph(mixture, enrollment, model, params, mask_override).data


def si_snr(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Scale-invariant SNR in dB, capped at +60 dB."""
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if estimate.shape != reference.shape:
        raise ValueError(f'SI-SNR needs equal lengths, found {estimate.shape} '
                         f'and {reference.shape}')
    estimate = estimate - estimate.mean()
    reference = reference - reference.mean()
    ref_energy = float(np.dot(reference, reference))
    if ref_energy == 0.0:
        raise ValueError('SI-SNR is undefined for a zero reference')
    target = np.dot(estimate, reference) / ref_energy * reference
    error = estimate - target
    error_energy = float(np.dot(error, error))
    target_energy = float(np.dot(target, target))
    if error_energy == 0.0:
        return SI_SNR_CAP_DB
    if target_energy == 0.0:
        return -SI_SNR_CAP_DB
    return float(np.clip(10.0 * np.log10(target_energy / error_energy),
                         -SI_SNR_CAP_DB, SI_SNR_CAP_DB))


def neg_si_snr_node(estimate: dc.Var, reference: np.ndarray) -> dc.Var:
    """-SI-SNR of a graph signal, with a small energy floor in both terms."""
    x = estimate.data - estimate.data.mean()
    r = np.asarray(reference, dtype=np.float64)
    r = r - r.mean()
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0.0:
        raise ValueError('SI-SNR is undefined for a zero reference')
    s = np.dot(x, r) / ref_energy * r
    e = x - s
    s_energy = float(np.dot(s, s)) + SI_SNR_EPS
    e_energy = float(np.dot(e, e)) + SI_SNR_EPS
    value = 10.0 * math.log10(s_energy / e_energy)
    grad = (10.0 / math.log(10.0)) * (2.0 * s / s_energy - 2.0 * e / e_energy)
    grad = grad - grad.mean()
    return dc.scalar_op(-value, estimate, -grad)


def si_snr_improvement(estimate: np.ndarray, mixture: np.ndarray, reference: np.ndarray) -> float:
    return si_snr(estimate, reference) - si_snr(mixture, reference)


def mean_si_snr_improvement(records: Sequence, model: ExtractorModel) -> float:
    if not records:
        raise ValueError('No records to evaluate the extractor on')
    gains = [si_snr_improvement(extract_target(r.mixture, r.enrollment, model), r.mixture,
                                r.target_clean) for r in records]
    return float(np.mean(gains))


def train_extractor(records: Sequence, config: ExperimentConfig, seed: int,
                    causal: bool = False) -> Tuple[ExtractorModel, training.FitHistory]:
    """Minimize -SI-SNR of the extracted signal against ``target_clean``."""
    cfg = config.extractor
    model = init_extractor(seed, cfg, causal)

    def objective(params, record):
        estimate = extraction_graph(record.mixture, record.enrollment, model, params)
        loss = neg_si_snr_node(estimate, record.target_clean)
        return loss, {'si_snr': -float(loss.data)}

    history = training.fit(
        model.store, list(records), objective, epochs=cfg.epochs,
        batch_size=config.train.batch_size,
        optimizer=training.MomentumSGD(cfg.learning_rate, config.train.momentum,
                                       config.train.grad_clip),
        seed=seed, name='causal extractor' if causal else 'extractor')
    return model, history


def extractor_latency_ms(config: ExtractorConfig, sample_rate: int) -> float:
    """Algorithmic latency of the causal extractor: one analysis window.

    Output sample n is final once the frame starting at the last hop boundary
    at or before n is complete, which is at most window - 1 samples after n.
    Later frames only add to later samples, so no hop is counted.
    """
    return 1000.0 * config.window / sample_rate


Extractor = Union[ExtractorModel, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def cascade_decode(mixture: np.ndarray, enrollment: np.ndarray, extractor: Extractor,
                   asr: transducer.TransducerModel, beam: int = 8) -> Tuple[int, ...]:
    """Extract the target, then decode it with the single-talker recognizer.

    ``extractor`` may be a trained model or any callable (mixture, enrollment) -> signal.
    """
    if isinstance(extractor, ExtractorModel):
        estimate = extract_target(mixture, enrollment, extractor)
    else:
        estimate = extractor(mixture, enrollment)
    enc = transducer.encode(transducer.extract_features(estimate, asr.features), asr)
    return decode.beam_decode(enc, asr, beam)


def cascade_transcripts(records: Sequence, extractor: Extractor, asr: transducer.TransducerModel,
                        beam: int = 8) -> Dict[str, Tuple[int, ...]]:
    return {r.utt_id: cascade_decode(r.mixture, r.enrollment, extractor, asr, beam)
            for r in records}


def oracle_extractor(records: Sequence) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Returns ``target_clean`` for any mixture of ``records`` (evaluation hook)."""
    by_mixture = {r.mixture.tobytes(): r.target_clean for r in records}

    def extract(mixture, enrollment):
        return by_mixture[np.asarray(mixture, dtype=np.float64).tobytes()]
    return extract


def identity_extractor(mixture: np.ndarray, enrollment: np.ndarray) -> np.ndarray:
    return np.asarray(mixture, dtype=np.float64)
