"""End-to-end experiment: corpus, teachers, extractors, students, scoring and report.

Every step writes its artifact under ``config.output_dir`` stamped with the
config hash and seed, and is skipped when that artifact already exists, so
re-running a finished pipeline trains nothing and rewrites the same report.
"""

import collections
import dataclasses
import logging
import os
import time
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import yaml

from kd_tsasr.library import checkpoint
from kd_tsasr.library import corpus
from kd_tsasr.library import decode
from kd_tsasr.library import distill
from kd_tsasr.library import scoring
from kd_tsasr.library import speaker
from kd_tsasr.library import training
from kd_tsasr.library import transducer
from kd_tsasr.library import tse
from kd_tsasr.library.config import ExperimentConfig, StreamingConfig, config_hash, dump_config
from kd_tsasr.library.errors import ConfigHashMismatch, MissingArtifactError

LOG = logging.getLogger("implementation")

OFFLINE = 'offline'
STREAMING = 'streaming'
MODES = (OFFLINE, STREAMING)


class TimeCheckpointer:
    def __init__(self):
        self._checkpoint_time = time.time()

    def checkpoint(self):
        """Get elapsed time in seconds."""
        time_now = time.time()
        checkpoint_delta = round(time_now - self._checkpoint_time, 4)
        self._checkpoint_time = time_now
        return f'<time elapsed: {checkpoint_delta} seconds>'


class ArtifactPaths:
    """File layout of one experiment directory."""

    def __init__(self, root: str):
        self.root = root

    @property
    def corpus_dir(self) -> str:
        return os.path.join(self.root, 'corpus')

    def seed_dir(self, seed: int) -> str:
        return os.path.join(self.root, f'seed{seed}')

    def model(self, seed: int, name: str) -> str:
        return os.path.join(self.seed_dir(seed), f'{name}.ckpt')

    def training_log(self, seed: int, name: str) -> str:
        return os.path.join(self.seed_dir(seed), f'{name}.log.csv')

    def hyps(self, seed: int, system: str, split: str = 'test') -> str:
        return os.path.join(self.seed_dir(seed), 'hyps', f'{split}_{system}.tsv')

    def seed_meta(self, seed: int) -> str:
        return os.path.join(self.seed_dir(seed), 'meta.yaml')

    @property
    def report_csv(self) -> str:
        return os.path.join(self.root, 'report.csv')

    @property
    def report_txt(self) -> str:
        return os.path.join(self.root, 'report.txt')

    @property
    def run_meta(self) -> str:
        return os.path.join(self.root, 'run_meta.yaml')

    @property
    def config_echo(self) -> str:
        return os.path.join(self.root, 'config.yaml')


class SystemSpec(NamedTuple):
    system: str
    mode: str
    description: str
    # None for the cascade, 0.0 for the KD-free target-speaker transducer.
    lam: Optional[float]

    @property
    def is_cascade(self) -> bool:
        return self.lam is None


def system_specs(lambdas: Sequence[float]) -> List[SystemSpec]:
    """BO1/BO2/PO1.. then BS1/BS2/PS1.. in report order."""
    specs = []
    for mode, letter in ((OFFLINE, 'O'), (STREAMING, 'S')):
        specs.append(SystemSpec(f'B{letter}1', mode, 'TSE + RNNT cascade', None))
        specs.append(SystemSpec(f'B{letter}2', mode, 'TS-RNNT', 0.0))
        for i, lam in enumerate(lambdas, start=1):
            specs.append(SystemSpec(f'P{letter}{i}', mode, 'TS-RNNT + KD', float(lam)))
    return specs


def student_name(mode: str, lam: float) -> str:
    return f'student_{mode}_lam{lam:g}'


def require(path: str, step: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(step, path)
    return path


# Hypothesis files.

def format_hypotheses(hyps: Dict[str, Sequence[int]]) -> str:
    return ''.join(f'{utt_id}\t{" ".join(str(t) for t in hyps[utt_id])}\n'
                   for utt_id in sorted(hyps))


def write_hypotheses(path: str, hyps: Dict[str, Sequence[int]], stamp_hash: str, seed: int):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, 'w') as f:
        f.write(f'# config_hash={stamp_hash} seed={seed}\n')
        f.write(format_hypotheses(hyps))


def read_hypotheses(path: str, expected_hash: Optional[str] = None) -> Dict[str, Tuple[int, ...]]:
    """Parse ``utt_id<TAB>tokens`` lines; a ``# config_hash=..`` header is checked if present."""
    hyps = {}
    with open(path, 'r') as f:
        for line in f:
            line = line.rstrip('\n')
            if not line:
                continue
            if line.startswith('#'):
                fields = dict(item.split('=', 1) for item in line[1:].split() if '=' in item)
                found = fields.get('config_hash')
                if expected_hash is not None and found != expected_hash:
                    raise ConfigHashMismatch(path, expected_hash, found)
                continue
            utt_id, _, tokens = line.partition('\t')
            hyps[utt_id] = tuple(int(t) for t in tokens.split())
    return hyps


# Corpus.

def load_corpus(corpus_dir: str, config: ExperimentConfig) -> List[corpus.MixtureRecord]:
    """Read every split file, refusing files written under another corpus config."""
    expected = config_hash(config.corpus)
    records = []
    for name in corpus.split_file_names(config.corpus).values():
        path = require(os.path.join(corpus_dir, name), 'corpus')
        header, split_records = corpus.read_split(path)
        if header.get('config_hash') != expected:
            raise ConfigHashMismatch(path, expected, header.get('config_hash'))
        records.extend(split_records)
    return records


def prepare_corpus(config: ExperimentConfig, corpus_dir: str) -> List[corpus.MixtureRecord]:
    train_path = os.path.join(corpus_dir, corpus.split_file_names(config.corpus)['train'])
    if os.path.exists(train_path):
        LOG.info(f'Reusing corpus in {corpus_dir}')
    else:
        records = corpus.build_dataset(config.corpus, config.corpus.seed)
        corpus.write_corpus(records, corpus_dir, config.corpus, config.corpus.seed)
    # Always train on what is on disk so a resumed run sees the same float32 signals.
    return load_corpus(corpus_dir, config)


# Model checkpoints.

def save_model(path: str, model, stamp_hash: str, seed: int, kind: str,
               streaming: Optional[StreamingConfig] = None, **extra):
    metadata = {
        'config_hash': stamp_hash,
        'seed': seed,
        'kind': kind,
        'streaming': None if streaming is None else dataclasses.asdict(streaming),
    }
    metadata.update(extra)
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    checkpoint.save_store(path, model.store, metadata)
    LOG.info(f'Saved {kind} checkpoint {path}')


def load_model(path: str, config: ExperimentConfig, expected_hash: Optional[str] = None):
    """Rebuild a teacher, student or extractor from its checkpoint; returns (model, metadata)."""
    store, metadata = checkpoint.load_store(path, expected_hash)
    kind = metadata.get('kind')
    streaming = metadata.get('streaming')
    streaming = None if streaming is None else StreamingConfig(**streaming)
    vocab_size = config.corpus.vocab_size
    if kind == 'teacher':
        model = transducer.TransducerModel(store, config.features, config.model, vocab_size,
                                           streaming)
    elif kind == 'student':
        model = speaker.TargetSpeakerModel(transducer.TransducerModel(
            store, config.features, config.model, vocab_size, streaming, conditioned=True))
    elif kind == 'extractor':
        model = tse.ExtractorModel(store, config.extractor, causal=bool(metadata.get('causal')))
    else:
        raise ValueError(f'Checkpoint "{path}" has unknown model kind {kind!r}')
    return model, metadata


def obtain_model(path: str, log_path: str, config: ExperimentConfig, seed: int, kind: str,
                 train_fn: Callable[[], Tuple[object, training.FitHistory]],
                 streaming: Optional[StreamingConfig] = None, freeze: bool = False, **extra):
    """Load ``path`` if it exists, otherwise train, optionally freeze, and save it."""
    stamp_hash = config_hash(config)
    if os.path.exists(path):
        LOG.info(f'Reusing {path}')
        return load_model(path, config, stamp_hash)[0]
    model, history = train_fn()
    if freeze:
        model.store.freeze()
    save_model(path, model, stamp_hash, seed, kind, streaming, **extra)
    training.write_training_log(log_path, history.epochs)
    return model


def obtain_hypotheses(path: str, stamp_hash: str, seed: int,
                      transcribe: Callable[[], Dict[str, Tuple[int, ...]]]):
    if os.path.exists(path):
        return read_hypotheses(path, stamp_hash)
    hyps = transcribe()
    write_hypotheses(path, hyps, stamp_hash, seed)
    return hyps


# Pipeline steps.

def run_seed(config: ExperimentConfig, seed: int, records: Sequence[corpus.MixtureRecord],
             paths: ArtifactPaths, timer: TimeCheckpointer) -> List[str]:
    """Train and decode every system for one seed; returns non-blocking errors."""
    errors = []
    stamp_hash = config_hash(config)
    beam = config.decode.beam
    train = corpus.records_in_split(records, 'train')
    dev = corpus.records_in_split(records, 'dev')
    test = corpus.records_in_split(records, 'test')

    def model_step(name, kind, train_fn, streaming=None, freeze=False, **extra):
        model = obtain_model(paths.model(seed, name), paths.training_log(seed, name), config,
                             seed, kind, train_fn, streaming, freeze, **extra)
        LOG.info(f'seed {seed}: {name} ready {timer.checkpoint()}')
        return model

    def hyp_step(system, split_records, split, transcribe):
        return obtain_hypotheses(paths.hyps(seed, system, split), stamp_hash, seed,
                                 lambda: transcribe(split_records))

    teacher = model_step(
        'teacher', 'teacher',
        lambda: distill.train_teacher(train, config, seed, dev_records=dev), freeze=True)
    teacher_streaming = model_step(
        'teacher_streaming', 'teacher',
        lambda: distill.train_teacher(train, config, seed, streaming=config.streaming,
                                      init_from=teacher, epochs=config.train.streaming_epochs,
                                      dev_records=dev),
        streaming=config.streaming, freeze=True)

    extractors = {}
    for mode, causal in ((OFFLINE, False), (STREAMING, True)):
        extractors[mode] = model_step(
            'extractor' if not causal else 'extractor_causal', 'extractor',
            lambda causal=causal: tse.train_extractor(train, config, seed, causal=causal),
            causal=causal)
    improvements = {mode: tse.mean_si_snr_improvement(dev, extractors[mode]) for mode in MODES}
    LOG.info(f'seed {seed}: dev SI-SNR improvement offline {improvements[OFFLINE]:.2f} dB, '
             f'causal {improvements[STREAMING]:.2f} dB')
    if improvements[OFFLINE] <= 0:
        errors.append(f'seed {seed}: offline extractor did not improve dev SI-SNR '
                      f'({improvements[OFFLINE]:.2f} dB)')
    if improvements[STREAMING] > improvements[OFFLINE]:
        LOG.warning(f'seed {seed}: causal extractor improved dev SI-SNR more than the offline one')

    asr = {OFFLINE: teacher, STREAMING: teacher_streaming}
    students = {}
    separations = {}
    for spec in system_specs(config.train.lambdas):
        if spec.is_cascade:
            hyp_step(spec.system, test, 'test',
                     lambda rs, m=spec.mode: tse.cascade_transcripts(rs, extractors[m], asr[m],
                                                                     beam))
            continue
        streaming = config.streaming if spec.mode == STREAMING else None
        kd = distill.KDConfig.from_experiment(
            config, spec.lam, seed,
            epochs=config.train.streaming_epochs if streaming else config.train.epochs)
        init_from = students.get((OFFLINE, spec.lam)) if streaming else None
        student = model_step(
            student_name(spec.mode, spec.lam), 'student',
            lambda kd=kd, m=spec.mode, s=streaming, i=init_from: distill.train_student(
                train, asr[m], kd, config, streaming=s, init_from=i, dev_records=dev),
            streaming=streaming, **{'lambda': spec.lam})
        students[(spec.mode, spec.lam)] = student
        if spec.mode == OFFLINE:
            separations[spec.system] = speaker.speaker_separation(dev, student)
        for split, split_records in (('test', test), ('dev', dev)):
            hyp_step(spec.system, split_records, split,
                     lambda rs, m=student: distill.transcribe_mixtures(rs, m, beam))
        LOG.info(f'seed {seed}: {spec.system} decoded {timer.checkpoint()}')

    meta = {
        'seed': seed,
        'config_hash': stamp_hash,
        'extractor_si_snr_improvement_db': {m: float(v) for m, v in improvements.items()},
        'extractor_latency_ms': tse.extractor_latency_ms(config.extractor,
                                                         config.corpus.sample_rate),
        'streaming_latency_ms': decode.algorithmic_latency_ms(config.features,
                                                              config.streaming.chunk),
        'speaker_cosine': {system: {'same': s.same, 'different': s.different}
                           for system, s in separations.items()},
    }
    with open(paths.seed_meta(seed), 'w') as f:
        yaml.safe_dump(meta, f, sort_keys=True)
    return errors


def collect_reports(config: ExperimentConfig, paths: ArtifactPaths,
                    records: Sequence[corpus.MixtureRecord]):
    """Score every cached hypothesis file; returns (test reports, dev TERs per mode and seed)."""
    stamp_hash = config_hash(config)
    test = corpus.records_in_split(records, 'test')
    dev = corpus.records_in_split(records, 'dev')
    refs = {r.utt_id: r.transcript for r in test}
    conditions = {r.utt_id: r.condition for r in test}
    reports: Dict[Tuple[str, int], scoring.ScoreReport] = {}
    dev_ters: Dict[Tuple[str, int], Dict[float, float]] = {}
    for seed in config.seeds:
        for spec in system_specs(config.train.lambdas):
            hyps = read_hypotheses(require(paths.hyps(seed, spec.system), 'report'), stamp_hash)
            reports[(spec.system, seed)] = scoring.score_split(hyps, refs, conditions,
                                                               spec.system, seed)
            if spec.lam:
                dev_hyps = read_hypotheses(require(paths.hyps(seed, spec.system, 'dev'), 'report'),
                                           stamp_hash)
                dev_ters.setdefault((spec.mode, seed), {})[spec.lam] = distill.ter_of(dev_hyps, dev)
    return reports, dev_ters


def write_report(config: ExperimentConfig, paths: ArtifactPaths,
                 reports: Dict[Tuple[str, int], scoring.ScoreReport],
                 dev_ters: Dict[Tuple[str, int], Dict[float, float]]) -> List[scoring.TableRow]:
    """Write report.csv, report.txt and run_meta.yaml; returns the table rows."""
    seeds = sorted(config.seeds)
    specs = system_specs(config.train.lambdas)
    by_lambda = {(s.mode, s.lam): s.system for s in specs}
    rows = []
    comparisons = {}
    best_lambdas = {}
    reductions = {}
    for mode in MODES:
        mode_specs = [s for s in specs if s.mode == mode]
        for spec in mode_specs:
            rows.append(scoring.table_row(spec.system, mode, spec.description, spec.lam,
                                          [reports[(spec.system, s)] for s in seeds]))
        best = {s: distill.select_best_lambda(dev_ters[(mode, s)]) for s in seeds}
        best_lambdas[mode] = best
        selected = [reports[(by_lambda[(mode, best[s])], s)] for s in seeds]
        baseline = [reports[(mode_specs[1].system, s)] for s in seeds]
        most_common = collections.Counter(best[s] for s in seeds).most_common(1)[0][0]
        rows.append(scoring.table_row(f'P{mode[0].upper()}*', mode,
                                      'TS-RNNT + KD (dev-selected lambda)', None, selected,
                                      best_lambda=most_common))
        comparisons[f'{mode} TS-RNNT vs KD (dev lambda)'] = scoring.compare_systems(
            baseline, selected)
        reductions[mode] = {s: scoring.relative_reduction(b.average, k.average)
                            for s, b, k in zip(seeds, baseline, selected)}
    cascade = [reports[('BS1', s)] for s in seeds]
    integrated = [reports[('BS2', s)] for s in seeds]
    comparisons['streaming cascade vs TS-RNNT'] = scoring.compare_systems(cascade, integrated)

    with open(paths.report_csv, 'w') as f:
        f.write(scoring.format_csv(rows))
    table = scoring.format_table(rows, comparisons)
    with open(paths.report_txt, 'w') as f:
        f.write(table)
    LOG.info(f'Result table:\n{table}')

    seed_meta = {}
    for seed in seeds:
        if os.path.exists(paths.seed_meta(seed)):
            with open(paths.seed_meta(seed), 'r') as f:
                seed_meta[seed] = yaml.safe_load(f)
    meta = {
        'config_hash': config_hash(config),
        'seeds': seeds,
        'best_lambda': {m: {s: float(v) for s, v in best.items()}
                        for m, best in best_lambdas.items()},
        'relative_reduction': {m: {s: float(v) for s, v in r.items()}
                               for m, r in reductions.items()},
        'streaming_reduction_at_least_offline': sum(
            reductions[STREAMING][s] >= reductions[OFFLINE][s] for s in seeds),
        'causal_extractor_at_most_offline': sum(
            m['extractor_si_snr_improvement_db'][STREAMING]
            <= m['extractor_si_snr_improvement_db'][OFFLINE] for m in seed_meta.values()),
        'comparisons': {name: {k: (list(v) if isinstance(v, tuple) else v)
                               for k, v in dataclasses.asdict(c).items()}
                        for name, c in comparisons.items()},
        'per_seed': seed_meta,
    }
    with open(paths.run_meta, 'w') as f:
        yaml.safe_dump(meta, f, sort_keys=True)
    return rows


def build_report(config: ExperimentConfig) -> List[scoring.TableRow]:
    """Score cached hypotheses of a finished run and rewrite the report files."""
    paths = ArtifactPaths(config.output_dir)
    records = load_corpus(paths.corpus_dir, config)
    reports, dev_ters = collect_reports(config, paths, records)
    return write_report(config, paths, reports, dev_ters)


def run_pipeline(config: ExperimentConfig, corpus_dir: Optional[str] = None) -> List[str]:
    """Run every experiment step for every seed, resuming from existing artifacts.

    Args:
        config: The validated experiment configuration.
        corpus_dir: Optional corpus location; defaults to ``<output_dir>/corpus``.

    Returns:
        A list of non-blocking errors: problems that did not stop the run but
        should fail it (for example an extractor that made dev SI-SNR worse).
    """
    non_blocking_errors = []
    timer = TimeCheckpointer()  # Timer for logging.
    paths = ArtifactPaths(config.output_dir)
    os.makedirs(paths.root, exist_ok=True)
    LOG.info(f'Experiment {config_hash(config)} in {paths.root}, seeds {list(config.seeds)}')
    with open(paths.config_echo, 'w') as f:
        f.write(dump_config(config))

    records = prepare_corpus(config, corpus_dir or paths.corpus_dir)
    LOG.info(f'{timer.checkpoint()}\nCorpus ready with {len(records)} records')

    for seed in config.seeds:
        os.makedirs(paths.seed_dir(seed), exist_ok=True)
        non_blocking_errors.extend(run_seed(config, seed, records, paths, timer))
        LOG.info(f'{timer.checkpoint()}\nSeed {seed} complete')

    reports, dev_ters = collect_reports(config, paths, records)
    write_report(config, paths, reports, dev_ters)
    LOG.info(f'{timer.checkpoint()}\nWrote {paths.report_txt}')
    return non_blocking_errors
