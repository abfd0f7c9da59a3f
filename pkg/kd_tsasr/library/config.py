"""Experiment configuration.

Configuration files are plain text with one ``section.key = value`` entry per
line. Values are parsed with YAML so lists, booleans and numbers get their
natural types:

    # corpus
    corpus.vocab_size = 6
    corpus.sir_range = [-5.0, 5.0]
    train.lambdas = [1.0, 0.5, 0.1, 0.01, 0.001]
    streaming.chunk = 4

``--set section.key=value`` overrides use the same syntax and are applied
after the file.
"""
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

import yaml

from kd_tsasr.library.errors import ConfigError

LOG = logging.getLogger("config")

THREADS_ENV_VAR = 'XD_THREADS'


@dataclass(frozen=True)
class CorpusConfig:
    # Vocabulary size K, blank (id 0) included.
    vocab_size: int = 6
    signature_dim: int = 8
    # Samples per token segment.
    segment_length: int = 32
    # Strength of the additive speaker pattern inside every segment.
    speaker_gain: float = 0.6
    train_speakers: int = 12
    dev_speakers: int = 4
    test_speakers: int = 4
    # Explicit speaker ids per split; overrides the counts above when set.
    speaker_ids: Optional[Mapping[str, Tuple[int, ...]]] = None
    train_utterances: int = 120
    dev_utterances: int = 30
    test_utterances_per_snr: int = 16
    token_length: Tuple[int, int] = (2, 5)
    enrollment_tokens: int = 4
    sir_range: Tuple[float, float] = (-5.0, 5.0)
    snr_range: Tuple[float, float] = (0.0, 20.0)
    test_snrs: Tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    sample_rate: int = 8000
    seed: int = 0


@dataclass(frozen=True)
class FeatureConfig:
    window: int = 16
    hop: int = 8
    num_features: int = 16
    subsampling: int = 1
    sample_rate: int = 8000


@dataclass(frozen=True)
class ModelConfig:
    enc_dim: int = 24
    enc_blocks: int = 2
    pred_dim: int = 24
    joint_dim: int = 24
    spk_blocks: int = 2
    init_scale: float = 1.0


@dataclass(frozen=True)
class StreamingConfig:
    # Chunk and history sizes in encoder frames.
    chunk: int = 4
    history: int = 4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    streaming_epochs: int = 4
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 8
    grad_clip: float = 5.0
    lambdas: Tuple[float, ...] = (1.0, 0.5, 0.1, 0.01, 0.001)


@dataclass(frozen=True)
class ExtractorConfig:
    window: int = 16
    hop: int = 8
    dim: int = 24
    blocks: int = 2
    spk_blocks: int = 1
    epochs: int = 6
    learning_rate: float = 0.01


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    streaming: StreamingConfig = field(default_factory=StreamingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = 'runs/default'


_SECTIONS = {
    'corpus': CorpusConfig,
    'features': FeatureConfig,
    'model': ModelConfig,
    'streaming': StreamingConfig,
    'train': TrainConfig,
    'extractor': ExtractorConfig,
    'decode': DecodeConfig,
}


def _coerce(value, default):
    """Bring a parsed YAML value to the type of the field default."""
    if isinstance(default, tuple) and isinstance(value, list):
        if default and all(isinstance(d, float) for d in default):
            return tuple(_coerce(v, 0.0) for v in value)
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def parse_assignment(line: str) -> Tuple[str, Any]:
    """Parse ``key = value`` (or ``key=value``) into a key and a typed value."""
    if '=' not in line:
        raise ConfigError(f'Expected "key = value", found "{line}"')
    key, raw = line.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigError(f'Empty key in "{line}"')
    try:
        value = yaml.safe_load(raw.strip()) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f'Cannot parse value for "{key}": {e}')
    return key, value


def read_config_lines(lines: Iterable[str]) -> Dict[str, Any]:
    assignments = {}
    for number, line in enumerate(lines, start=1):
        stripped = line.split('#', 1)[0].strip()
        if not stripped:
            continue
        try:
            key, value = parse_assignment(stripped)
        except ConfigError as e:
            raise ConfigError(f'line {number}: {e}')
        assignments[key] = value
    return assignments


def apply_assignments(config: ExperimentConfig, assignments: Mapping[str, Any]) -> ExperimentConfig:
    """Return a copy of ``config`` with dotted-key assignments applied."""
    top_level = {}
    sections = {name: {} for name in _SECTIONS}
    for key, value in assignments.items():
        if '.' in key:
            section, name = key.split('.', 1)
            if section not in _SECTIONS:
                raise ConfigError(f'Unknown config section "{section}" in "{key}"')
            known = {f.name: f for f in dataclasses.fields(_SECTIONS[section])}
            if name not in known:
                raise ConfigError(f'Unknown config key "{key}"')
            default = getattr(getattr(config, section), name)
            sections[section][name] = _coerce(value, default)
        else:
            if key not in ('seeds', 'output_dir'):
                raise ConfigError(f'Unknown config key "{key}"')
            top_level[key] = _coerce(value, getattr(config, key))

    updated = {}
    for section, values in sections.items():
        if values:
            updated[section] = dataclasses.replace(getattr(config, section), **values)
    updated.update(top_level)
    config = dataclasses.replace(config, **updated)
    validate(config)
    return config


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read a config file (optional) and apply ``--set`` overrides."""
    overrides = list(overrides)
    assignments = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f'Config file "{path}" does not exist')
        with open(path, 'r') as f:
            assignments.update(read_config_lines(f))
    for override in overrides:
        key, value = parse_assignment(override)
        assignments[key] = value
    config = apply_assignments(ExperimentConfig(), assignments)
    LOG.info(f'Loaded config (hash {config_hash(config)}) from {path or "<defaults>"} '
             f'with {len(overrides)} override(s)')
    return config


def validate(config: ExperimentConfig):
    corpus = config.corpus
    if corpus.vocab_size < 2:
        raise ConfigError(f'corpus.vocab_size must be >= 2, found {corpus.vocab_size}')
    low, high = corpus.token_length
    if low < 1 or high < low:
        raise ConfigError(f'corpus.token_length must satisfy 1 <= min <= max, '
                          f'found {corpus.token_length}')
    for name in ('sir_range', 'snr_range'):
        low, high = getattr(corpus, name)
        if high < low:
            raise ConfigError(f'corpus.{name} is empty: {getattr(corpus, name)}')
    lambdas = config.train.lambdas
    if not lambdas:
        raise ConfigError('train.lambdas must not be empty')
    if any(lam <= 0 for lam in lambdas):
        raise ConfigError(f'train.lambdas must be positive (lambda 0 is the baseline), '
                          f'found {lambdas}')
    if len(set(lambdas)) != len(lambdas):
        raise ConfigError(f'train.lambdas must be distinct, found {lambdas}')
    if len(set(config.seeds)) != len(config.seeds) or not config.seeds:
        raise ConfigError(f'seeds must be a non-empty list of distinct values, '
                          f'found {config.seeds}')
    if config.streaming.chunk < 1 or config.streaming.history < 0:
        raise ConfigError(f'streaming requires chunk >= 1 and history >= 0, '
                          f'found {config.streaming}')
    if config.features.hop < 1 or config.features.window < 1 or config.features.subsampling < 1:
        raise ConfigError(f'Invalid feature framing {config.features}')
    if config.decode.beam < 1:
        raise ConfigError(f'decode.beam must be >= 1, found {config.decode.beam}')


def config_to_dict(config) -> Dict[str, Any]:
    return dataclasses.asdict(config)


def config_hash(config) -> str:
    """Stable short hash of a config; stamps every artifact produced under it."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True, default=list)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def dump_config(config) -> str:
    """Human readable YAML echo of a config; the pipeline writes it beside its report."""
    return yaml.safe_dump(json.loads(json.dumps(config_to_dict(config), default=list)),
                          sort_keys=True)


def worker_count() -> int:
    """Worker pool size, capped by the XD_THREADS environment variable."""
    raw = os.environ.get(THREADS_ENV_VAR, '1')
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f'{THREADS_ENV_VAR} must be an integer, found "{raw}"')
    return max(1, threads)
