#!/usr/bin/env python3
"""
This is the entrypoint for the kd_tsasr experiments. It loads and validates
the experiment configuration, dispatches to one subcommand and maps the
library's failure types to process exit codes.
"""

import argparse
import logging
import os
import sys
import textwrap

from kd_tsasr import implementation
from kd_tsasr.library import corpus
from kd_tsasr.library import decode
from kd_tsasr.library import distill
from kd_tsasr.library import scoring
from kd_tsasr.library import speaker
from kd_tsasr.library import transducer
from kd_tsasr.library import tse
from kd_tsasr.library.config import StreamingConfig, config_hash, load_config
from kd_tsasr.library.errors import (EXIT_CONFIG, EXIT_ERRORS, EXIT_NUMERIC, EXIT_OK,
                                     ConfigError, MissingArtifactError, NumericFailure)
from kd_tsasr.library.training import write_training_log


# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
LOG = logging.getLogger("entrypoint")


def _seed(args, config) -> int:
    return config.seeds[0] if args.seed is None else args.seed


def _corpus_records(args, config):
    paths = implementation.ArtifactPaths(config.output_dir)
    return implementation.load_corpus(args.corpus or paths.corpus_dir, config)


def _log_path(checkpoint_path: str) -> str:
    return os.path.splitext(checkpoint_path)[0] + '.log.csv'


def _load_kind(path: str, config, kinds, step: str):
    model, metadata = implementation.load_model(implementation.require(path, step), config,
                                                config_hash(config))
    if metadata['kind'] not in kinds:
        raise ValueError(f'"{path}" holds a {metadata["kind"]} model, {step} needs {kinds}')
    return model


def cmd_corpus(args, config):
    out_dir = args.corpus_out or implementation.ArtifactPaths(config.output_dir).corpus_dir
    records = corpus.build_dataset(config.corpus, config.corpus.seed)
    corpus.write_corpus(records, out_dir, config.corpus, config.corpus.seed)
    return []


def cmd_train_teacher(args, config):
    seed = _seed(args, config)
    records = _corpus_records(args, config)
    streaming = config.streaming if args.streaming else None
    init_from = None
    if args.init:
        init_from = _load_kind(args.init, config, ('teacher',), 'train-teacher')
    model, history = distill.train_teacher(
        corpus.records_in_split(records, 'train'), config, seed, streaming=streaming,
        init_from=init_from, epochs=args.epochs,
        dev_records=corpus.records_in_split(records, 'dev'))
    model.store.freeze()
    name = 'teacher_streaming' if streaming else 'teacher'
    out = args.out or implementation.ArtifactPaths(config.output_dir).model(seed, name)
    implementation.save_model(out, model, config_hash(config), seed, 'teacher', streaming)
    write_training_log(_log_path(out), history.epochs)
    return []


def cmd_train_tse(args, config):
    seed = _seed(args, config)
    records = _corpus_records(args, config)
    model, history = tse.train_extractor(corpus.records_in_split(records, 'train'), config, seed,
                                         causal=args.causal)
    name = 'extractor_causal' if args.causal else 'extractor'
    out = args.out or implementation.ArtifactPaths(config.output_dir).model(seed, name)
    implementation.save_model(out, model, config_hash(config), seed, 'extractor',
                              causal=args.causal)
    write_training_log(_log_path(out), history.epochs)
    improvement = tse.mean_si_snr_improvement(corpus.records_in_split(records, 'dev'), model)
    LOG.info(f'Dev SI-SNR improvement {improvement:.2f} dB')
    if improvement <= 0:
        return [f'Extractor did not improve dev SI-SNR ({improvement:.2f} dB)']
    return []


def cmd_train_student(args, config):
    seed = _seed(args, config)
    paths = implementation.ArtifactPaths(config.output_dir)
    streaming = config.streaming if args.streaming else None
    teacher_path = args.teacher or paths.model(seed,
                                               'teacher_streaming' if streaming else 'teacher')
    teacher = _load_kind(teacher_path, config, ('teacher',), 'train-student')
    init_from = None
    if args.init:
        init_from = _load_kind(args.init, config, ('student',), 'train-student')
    records = _corpus_records(args, config)
    kd = distill.KDConfig.from_experiment(config, args.lam, seed, epochs=args.epochs,
                                          teacher_checkpoint=teacher_path)
    model, history = distill.train_student(
        corpus.records_in_split(records, 'train'), teacher, kd, config, streaming=streaming,
        init_from=init_from, dev_records=corpus.records_in_split(records, 'dev'))
    mode = implementation.STREAMING if streaming else implementation.OFFLINE
    out = args.out or paths.model(seed, implementation.student_name(mode, args.lam))
    implementation.save_model(out, model, config_hash(config), seed, 'student', streaming,
                              **{'lambda': args.lam, 'teacher': teacher_path})
    write_training_log(_log_path(out), history.epochs)
    return []


def _stream_decode(asr: transducer.TransducerModel, features: transducer.FeatureSequence,
                   conditioning, beam: int):
    session = decode.StreamSession(asr, conditioning=conditioning, beam=beam)
    step = asr.streaming.chunk * asr.features.subsampling
    for start in range(0, len(features.frames), step):
        session.push(features.frames[start:start + step])
    session.finish()
    return session.tokens


def cmd_decode(args, config):
    model = _load_kind(args.model, config, ('teacher', 'student'), 'decode')
    extractor = None
    if args.extractor:
        extractor = _load_kind(args.extractor, config, ('extractor',), 'decode')
    beam = config.decode.beam if args.beam is None else args.beam
    if args.streaming:
        model = model.with_streaming(StreamingConfig(
            chunk=config.streaming.chunk if args.chunk is None else args.chunk,
            history=config.streaming.history if args.history is None else args.history))
    _, records = corpus.read_split(args.input)

    hyps = {}
    for r in records:
        if isinstance(model, speaker.TargetSpeakerModel):
            asr = model.asr
            signal = r.mixture
            conditioning = speaker.embed_speaker(
                transducer.extract_features(r.enrollment, model.features), model)
        else:
            asr = model
            conditioning = None
            signal = (tse.extract_target(r.mixture, r.enrollment, extractor)
                      if extractor is not None else r.target_plus_noise)
        features = transducer.extract_features(signal, asr.features)
        if args.streaming:
            hyps[r.utt_id] = _stream_decode(asr, features, conditioning, beam)
        else:
            enc = transducer.encode(features, asr, conditioning)
            hyps[r.utt_id] = decode.beam_decode(enc, asr, beam)

    text = implementation.format_hypotheses(hyps)
    if args.output:
        with open(args.output, 'w') as f:
            f.write(text)
        LOG.info(f'Wrote {len(hyps)} hypotheses to {args.output}')
    else:
        sys.stdout.write(text)
    return []


def cmd_score(args, config):
    hyps = implementation.read_hypotheses(args.hyps)
    records = []
    for path in args.input:
        records.extend(corpus.read_split(path)[1])
    report = scoring.score_split(hyps, {r.utt_id: r.transcript for r in records},
                                 {r.utt_id: r.condition for r in records}, system=args.system)
    for condition, ter in report.condition_ter.items():
        label = 'all' if condition is None else f'{condition:g}dB'
        print(f'{label}\t{ter:.2f}\t{report.utterances[condition]} utt')
    print(f'avg\t{report.average:.2f}\tS={report.substitutions} I={report.insertions} '
          f'D={report.deletions} N={report.reference_tokens}')
    return []


def cmd_report(args, config):
    rows = implementation.build_report(config)
    LOG.info(f'Report with {len(rows)} rows written to {config.output_dir}')
    return []


def cmd_pipeline(args, config):
    return implementation.run_pipeline(config, corpus_dir=args.corpus)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='kd_tsasr',
        description='Knowledge-distilled target-speaker transducer experiments')
    parser.add_argument('--config', default=None, help='key = value experiment config file')
    parser.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='KEY=VALUE', help='Override one config key (repeatable)')
    parser.add_argument('--verbose', action='store_true', default=False,
                        help='Log at DEBUG level')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('corpus', help='Synthesize and write the corpus split files')
    p.add_argument('--corpus-out', default=None, help='Output directory for the split files')
    p.set_defaults(handler=cmd_corpus)

    p = sub.add_parser('train-teacher', help='Train the single-talker teacher transducer')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--streaming', action='store_true', default=False)
    p.add_argument('--init', default=None, help='Offline teacher checkpoint to start from')
    p.add_argument('--corpus', default=None)
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_train_teacher)

    p = sub.add_parser('train-tse', help='Train the target speech extractor')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--causal', action='store_true', default=False)
    p.add_argument('--corpus', default=None)
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_train_tse)

    p = sub.add_parser('train-student', help='Train a target-speaker student with KD weight')
    p.add_argument('--lambda', dest='lam', type=float, default=0.0)
    p.add_argument('--teacher', default=None, help='Frozen teacher checkpoint')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--streaming', action='store_true', default=False)
    p.add_argument('--init', default=None, help='Offline student checkpoint to start from')
    p.add_argument('--corpus', default=None)
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_train_student)

    p = sub.add_parser('decode', help='Decode one split file, one line per utterance')
    p.add_argument('--model', required=True)
    p.add_argument('--input', required=True)
    p.add_argument('--beam', type=int, default=None)
    p.add_argument('--streaming', action='store_true', default=False)
    p.add_argument('--chunk', type=int, default=None)
    p.add_argument('--history', type=int, default=None)
    p.add_argument('--extractor', default=None, help='Extractor checkpoint for cascade decoding')
    p.add_argument('--output', default=None)
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser('score', help='Token error rate of a hypothesis file')
    p.add_argument('--hyps', required=True)
    p.add_argument('--input', nargs='+', required=True, help='Reference split files')
    p.add_argument('--system', default='')
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser('report', help='Rebuild the result table from decoded hypotheses')
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser('pipeline', help='Run every step for every seed, resuming if possible')
    p.add_argument('--corpus', default=None)
    p.set_defaults(handler=cmd_pipeline)
    return parser


def main(argv=None):
    """Parse arguments, load the config and run one subcommand; returns the exit code."""
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        config = load_config(args.config, args.overrides)
        errors = args.handler(args, config)
    except ConfigError as e:
        LOG.error(f'Configuration error: {e}')
        return EXIT_CONFIG
    except NumericFailure as e:
        LOG.error(f'Numeric failure: {e}')
        return EXIT_NUMERIC
    except MissingArtifactError as e:
        LOG.error(str(e))
        return EXIT_ERRORS

    if errors:
        # Enumerate and indent each error message.
        indented_errors = [textwrap.indent(e, '    ') for e in errors]
        enumerated_errors = [f' {i+1}. ' + e[4:] for i, e in enumerate(indented_errors)]
        error_list = '\n'.join(enumerated_errors)
        LOG.error(f"{args.command} finished but experienced errors:\n{error_list}")
        return EXIT_ERRORS

    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
