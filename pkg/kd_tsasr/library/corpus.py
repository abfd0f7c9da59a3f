"""Synthetic parallel corpus of single-talker and two-talker signals.

Each speaker gets a unit-norm signature and a pitch factor. An utterance is
the concatenation of one fixed-length segment per token: a token-specific
pair of sinusoids (pitch-scaled per speaker) plus the speaker signature
projected onto the segment. Tokens are therefore recoverable from the
signal and speakers are separable by conditioning.

Every ``MixtureRecord`` keeps the parallel views of one target utterance:
``target_clean``, ``target_plus_noise`` (same noise realization as the
mixture) and ``mixture`` (``target_plus_noise`` plus the scaled interfering
talker), together with an enrollment utterance of the target speaker.
"""
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import yaml

from kd_tsasr.library.config import CorpusConfig, config_hash, config_to_dict

LOG = logging.getLogger("corpus")

SPLITS = ('train', 'dev', 'test')
MAGIC = b'XDCORPUS'
VERSION = 1

Signal = np.ndarray
TokenSequence = Tuple[int, ...]


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    # Unit-norm speaker signature.
    signature: np.ndarray
    # (K, segment_length) base waveform per token id; row 0 (blank) is unused.
    token_waveforms: np.ndarray
    # (segment_length, signature_dim) projection shared by all speakers.
    projection: np.ndarray
    speaker_gain: float = 0.6

    @property
    def vocab_size(self) -> int:
        return self.token_waveforms.shape[0]

    @property
    def segment_length(self) -> int:
        return self.token_waveforms.shape[1]


@dataclass(frozen=True)
class Utterance:
    speaker_id: int
    tokens: TokenSequence
    signal: Signal


@dataclass
class MixtureRecord:
    utt_id: str
    split: str
    mixture: Signal
    target_plus_noise: Signal
    target_clean: Signal
    enrollment: Signal
    transcript: TokenSequence
    sir_db: float
    snr_db: float
    target_speaker: int
    interferer_speaker: int
    # Scaled interfering talker exactly as added to ``target_plus_noise``.
    interference: Signal = field(repr=False, default=None)
    # SNR label of fixed-SNR evaluation subsets, None elsewhere.
    condition: Optional[float] = None


@dataclass(frozen=True)
class CorpusBasis:
    """Vocabulary-level synthesis parameters shared by every speaker."""
    # (K, 2) cycles per segment of the two sinusoids of each token.
    token_frequencies: np.ndarray
    # (K,) phase of each token.
    token_phases: np.ndarray
    projection: np.ndarray


def make_basis(config: CorpusConfig, rng: np.random.Generator) -> CorpusBasis:
    K = config.vocab_size
    # Spread token frequencies over the band so tokens differ in every segment.
    base = np.linspace(1.5, config.segment_length / 5.0, num=max(K - 1, 1))
    freqs = np.zeros((K, 2))
    freqs[1:, 0] = base[:K - 1]
    freqs[1:, 1] = base[:K - 1][::-1] * 1.37 + 0.5
    phases = rng.uniform(0.0, 2.0 * np.pi, size=K)
    projection = rng.normal(0.0, 1.0, size=(config.segment_length, config.signature_dim))
    projection /= np.sqrt(config.signature_dim)
    return CorpusBasis(token_frequencies=freqs, token_phases=phases, projection=projection)


def make_speaker_profile(speaker_id: int, basis: CorpusBasis, config: CorpusConfig,
                         rng: np.random.Generator) -> SpeakerProfile:
    signature = rng.normal(0.0, 1.0, size=config.signature_dim)
    signature /= np.linalg.norm(signature)
    pitch = rng.uniform(0.8, 1.25)
    n = np.arange(config.segment_length) / config.segment_length
    waveforms = np.zeros((config.vocab_size, config.segment_length))
    for k in range(1, config.vocab_size):
        f1, f2 = basis.token_frequencies[k] * pitch
        phase = basis.token_phases[k]
        waveforms[k] = np.sin(2 * np.pi * f1 * n + phase) + 0.5 * np.sin(2 * np.pi * f2 * n)
    return SpeakerProfile(speaker_id=speaker_id, signature=signature, token_waveforms=waveforms,
                          projection=basis.projection, speaker_gain=config.speaker_gain)


def validate_tokens(tokens: Sequence[int], vocab_size: int):
    if len(tokens) == 0:
        raise ValueError('Token sequence must not be empty')
    for token in tokens:
        if not 1 <= int(token) <= vocab_size - 1:
            raise ValueError(f'Token id {token} outside [1, {vocab_size - 1}]')


def synthesize_utterance(profile: SpeakerProfile, tokens: Sequence[int],
                         rng_seed: int) -> Utterance:
    """Render ``tokens`` as spoken by ``profile``; deterministic in its arguments."""
    validate_tokens(tokens, profile.vocab_size)
    rng = np.random.default_rng(rng_seed)
    gains = rng.uniform(0.8, 1.2, size=len(tokens))
    pattern = profile.speaker_gain * (profile.projection @ profile.signature)
    segments = [gain * (profile.token_waveforms[int(k)] + pattern)
                for gain, k in zip(gains, tokens)]
    return Utterance(speaker_id=profile.speaker_id, tokens=tuple(int(k) for k in tokens),
                     signal=np.concatenate(segments))


def signal_power(signal: Signal) -> float:
    return float(np.mean(np.square(signal)))


def fit_length(signal: Signal, length: int) -> Signal:
    """Zero-pad or truncate ``signal`` to ``length`` samples."""
    if len(signal) >= length:
        return signal[:length]
    return np.concatenate([signal, np.zeros(length - len(signal))])


def scale_to_ratio(foreground: Signal, background: Signal, ratio_db: float) -> Signal:
    """Scale ``background`` so that 10 log10(P_fore / P_back) equals ``ratio_db``."""
    if len(foreground) == 0 or len(background) == 0:
        raise ValueError('Cannot mix empty signals')
    background = fit_length(np.asarray(background, dtype=np.float64), len(foreground))
    p_fore = signal_power(foreground)
    p_back = signal_power(background)
    if p_fore == 0.0 or p_back == 0.0:
        raise ValueError(f'Mixing ratio undefined for zero-power input '
                         f'(foreground {p_fore}, background {p_back})')
    alpha = math.sqrt(p_fore / (p_back * 10.0 ** (ratio_db / 10.0)))
    return alpha * background


def mix_at_ratio(foreground: Signal, background: Signal, ratio_db: float) -> Signal:
    return foreground + scale_to_ratio(foreground, background, ratio_db)


def measured_ratio_db(foreground: Signal, background: Signal) -> float:
    return 10.0 * math.log10(signal_power(foreground) / signal_power(background))


def assign_speakers(config: CorpusConfig) -> Dict[str, Tuple[int, ...]]:
    """Speaker ids per split; rejects any overlap between splits."""
    if config.speaker_ids is not None:
        splits = {name: tuple(int(i) for i in config.speaker_ids.get(name, ())) for name in SPLITS}
    else:
        counts = (config.train_speakers, config.dev_speakers, config.test_speakers)
        splits, start = {}, 0
        for name, count in zip(SPLITS, counts):
            splits[name] = tuple(range(start, start + count))
            start += count
    for name, ids in splits.items():
        if len(ids) < 2:
            raise ValueError(f'Split "{name}" needs at least 2 speakers, found {len(ids)}')
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1:]:
            overlap = set(splits[a]) & set(splits[b])
            if overlap:
                raise ValueError(f'Speakers {sorted(overlap)} appear in both "{a}" and "{b}"')
    return splits


def _record_rng(seed: int, split_index: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, split_index, index]))


def _draw_tokens(rng: np.random.Generator, config: CorpusConfig, count: Optional[int] = None):
    if count is None:
        low, high = config.token_length
        count = int(rng.integers(low, high + 1))
    return tuple(int(t) for t in rng.integers(1, config.vocab_size, size=count))


def make_record(utt_id: str, split: str, profiles: Mapping[int, SpeakerProfile],
                speakers: Sequence[int], config: CorpusConfig, rng: np.random.Generator,
                snr_db: Optional[float] = None, condition: Optional[float] = None) -> MixtureRecord:
    target_id, interferer_id = (int(s) for s in rng.choice(speakers, size=2, replace=False))
    target_profile = profiles[target_id]
    transcript = _draw_tokens(rng, config)
    target = synthesize_utterance(target_profile, transcript, int(rng.integers(2**31)))

    # Full overlap: the interferer spans the whole target utterance.
    n_interf = int(math.ceil(len(target.signal) / config.segment_length))
    interferer = synthesize_utterance(profiles[interferer_id], _draw_tokens(rng, config, n_interf),
                                      int(rng.integers(2**31)))

    enrollment_tokens = _draw_tokens(rng, config, config.enrollment_tokens)
    enrollment_seed = int(rng.integers(2**31))
    while enrollment_tokens == transcript and config.vocab_size > 2:
        enrollment_tokens = _draw_tokens(rng, config, config.enrollment_tokens)
    enrollment = synthesize_utterance(target_profile, enrollment_tokens, enrollment_seed)

    sir_db = float(rng.uniform(*config.sir_range))
    if snr_db is None:
        snr_db = float(rng.uniform(*config.snr_range))
    noise = rng.normal(0.0, 1.0, size=len(target.signal))

    target_plus_noise = mix_at_ratio(target.signal, noise, snr_db)
    interference = scale_to_ratio(target.signal, interferer.signal, sir_db)
    mixture = target_plus_noise + interference
    return MixtureRecord(
        utt_id=utt_id, split=split, mixture=mixture, target_plus_noise=target_plus_noise,
        target_clean=target.signal, enrollment=enrollment.signal, transcript=transcript,
        sir_db=sir_db, snr_db=float(snr_db), target_speaker=target_id,
        interferer_speaker=interferer_id, interference=interference, condition=condition)


def build_dataset(config: CorpusConfig, rng_seed: int) -> List[MixtureRecord]:
    """Train, dev and fixed-SNR test records; pure in (config, rng_seed)."""
    splits = assign_speakers(config)
    rng = np.random.default_rng(rng_seed)
    basis = make_basis(config, rng)
    profiles = {}
    for speaker_id in sorted(s for ids in splits.values() for s in ids):
        profiles[speaker_id] = make_speaker_profile(speaker_id, basis, config, rng)

    records = []
    for i in range(config.train_utterances):
        records.append(make_record(f'train-{i:05d}', 'train', profiles, splits['train'], config,
                                   _record_rng(rng_seed, 0, i)))
    for i in range(config.dev_utterances):
        records.append(make_record(f'dev-{i:05d}', 'dev', profiles, splits['dev'], config,
                                   _record_rng(rng_seed, 1, i)))
    for c, snr in enumerate(config.test_snrs):
        for i in range(config.test_utterances_per_snr):
            index = c * config.test_utterances_per_snr + i
            records.append(make_record(f'test_snr{snr:g}-{i:04d}', 'test', profiles,
                                       splits['test'], config, _record_rng(rng_seed, 2, index),
                                       snr_db=float(snr), condition=float(snr)))
    LOG.info(f'Built {len(records)} records over {len(profiles)} speakers (seed {rng_seed})')
    return records


def records_in_split(records: Iterable[MixtureRecord], split: str,
                     condition: Optional[float] = None) -> List[MixtureRecord]:
    out = [r for r in records if r.split == split]
    if condition is not None:
        out = [r for r in out if r.condition == condition]
    return out


class SingleTalkerPair(NamedTuple):
    utt_id: str
    # target_plus_noise of the source record.
    signal: Signal
    transcript: TokenSequence


def single_talker_pairs(records: Iterable[MixtureRecord]) -> Iterator[SingleTalkerPair]:
    """Single-talker views of the records; mixtures are never exposed."""
    for r in records:
        yield SingleTalkerPair(r.utt_id, r.target_plus_noise, r.transcript)


# Split files.

def _write_u32(f, value):
    f.write(struct.pack('<I', value))


def _read_u32(f):
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError('Truncated corpus file')
    return struct.unpack('<I', raw)[0]


def _write_f64(f, value):
    f.write(struct.pack('<d', value))


def _read_f64(f):
    return struct.unpack('<d', f.read(8))[0]


def _write_text(f, text):
    data = text.encode('utf-8')
    _write_u32(f, len(data))
    f.write(data)


def _read_text(f):
    return f.read(_read_u32(f)).decode('utf-8')


def _write_signal(f, signal):
    data = np.asarray(signal, dtype='<f4')
    _write_u32(f, data.size)
    f.write(data.tobytes())


def _read_signal(f):
    count = _read_u32(f)
    return np.frombuffer(f.read(4 * count), dtype='<f4').astype(np.float64)


def write_split(path: str, records: Sequence[MixtureRecord], config: CorpusConfig, seed: int):
    header = {
        'config': config_to_dict(config),
        'config_hash': config_hash(config),
        'seed': seed,
        'vocab_size': config.vocab_size,
        'count': len(records),
    }
    with open(path, 'wb') as f:
        f.write(MAGIC)
        _write_u32(f, VERSION)
        _write_text(f, yaml.safe_dump(_plain(header), sort_keys=True))
        _write_u32(f, len(records))
        for r in records:
            _write_text(f, r.utt_id)
            _write_text(f, r.split)
            _write_u32(f, r.target_speaker)
            _write_u32(f, r.interferer_speaker)
            _write_f64(f, r.sir_db)
            _write_f64(f, r.snr_db)
            _write_f64(f, math.nan if r.condition is None else r.condition)
            tokens = np.asarray(r.transcript, dtype='<u4')
            _write_u32(f, tokens.size)
            f.write(tokens.tobytes())
            for signal in (r.mixture, r.target_plus_noise, r.target_clean, r.enrollment,
                           r.interference):
                _write_signal(f, signal)


def read_split(path: str) -> Tuple[dict, List[MixtureRecord]]:
    with open(path, 'rb') as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f'"{path}" is not a corpus split file')
        version = _read_u32(f)
        if version != VERSION:
            raise ValueError(f'Unsupported corpus version {version} in "{path}"')
        header = yaml.safe_load(_read_text(f))
        records = []
        for _ in range(_read_u32(f)):
            utt_id = _read_text(f)
            split = _read_text(f)
            target_speaker = _read_u32(f)
            interferer_speaker = _read_u32(f)
            sir_db = _read_f64(f)
            snr_db = _read_f64(f)
            condition = _read_f64(f)
            count = _read_u32(f)
            transcript = tuple(int(t) for t in np.frombuffer(f.read(4 * count), dtype='<u4'))
            mixture, tpn, clean, enrollment, interference = (_read_signal(f) for _ in range(5))
            records.append(MixtureRecord(
                utt_id=utt_id, split=split, mixture=mixture, target_plus_noise=tpn,
                target_clean=clean, enrollment=enrollment, transcript=transcript,
                sir_db=sir_db, snr_db=snr_db, target_speaker=target_speaker,
                interferer_speaker=interferer_speaker, interference=interference,
                condition=None if math.isnan(condition) else condition))
    return header, records


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def split_file_names(config: CorpusConfig) -> Dict[str, str]:
    names = {'train': 'train.bin', 'dev': 'dev.bin'}
    for snr in config.test_snrs:
        names[f'test_snr{snr:g}'] = f'test_snr{snr:g}.bin'
    return names


def write_corpus(records: Sequence[MixtureRecord], out_dir: str, config: CorpusConfig,
                 seed: int) -> Dict[str, str]:
    """Write ``train.bin``, ``dev.bin`` and one ``test_snr<N>.bin`` per test SNR."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for key, name in split_file_names(config).items():
        if key.startswith('test_snr'):
            snr = float(key[len('test_snr'):])
            subset = records_in_split(records, 'test', condition=snr)
        else:
            subset = records_in_split(records, key)
        path = os.path.join(out_dir, name)
        write_split(path, subset, config, seed)
        paths[key] = path
        LOG.info(f'Wrote {len(subset)} records to {path}')
    return paths


def read_corpus(corpus_dir: str, config: CorpusConfig) -> List[MixtureRecord]:
    records = []
    for name in split_file_names(config).values():
        _, split_records = read_split(os.path.join(corpus_dir, name))
        records.extend(split_records)
    return records
