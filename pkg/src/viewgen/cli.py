"""Command-line entry point: ``viewgen <command> [flags]``.

Commands share ``--config`` (a file or the preset names ``desk``/``paper``),
``--data`` (dataset directory), ``--out`` (run directory) and ``--seed``.
Artifacts in the run directory have fixed names: ``vocab.bpe``,
``codec.bin``, ``model.bin``, ``metrics.jsonl`` and ``run.json``.

Exit codes: 0 success, 1 configuration or usage error, 2 data error,
3 numerical divergence (the failing state is dumped next to the outputs).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from . import codec as C
from . import model as Mo
from .bpe import Vocabulary, train_bpe
from .config import ConfigError, RunConfig, load, stage_seed
from .evaluation import COMPARISONS, IMAGE_CONDITIONS, encode_studies, evaluate, parse_conditions
from .metrics import FeatureStats, frechet_distance, image_features
from .pgm import write_pgm
from .sampling import generate_report, generate_view
from .synth import SynthStudy, generate_dataset, load_dataset, save_dataset
from .tensor import DivergenceError
from .views import View

log = logging.getLogger("viewgen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
CODEC_FILE, MODEL_FILE, VOCAB_FILE = "codec.bin", "model.bin", "vocab.bpe"
METRICS_FILE, RUN_FILE = "metrics.jsonl", "run.json"
TEST_SPLIT_VIEWS = (0.0, 1.0, 0.0)  # held-out studies are all frontal + lateral pairs


class DataError(Exception):
    """Missing or malformed input files."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems count as configuration errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- provenance helpers ---------------------------------------------------------------------

def blob_hash(path: Path) -> str:
    """Git-style object id of a file: sha1 over ``blob <size>\\0`` plus the content."""
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def tree_hash(root: Path, files: Iterable[Path]) -> str:
    """Content hash of a set of files keyed by their path relative to ``root``."""
    h = hashlib.sha1()
    for f in sorted(files, key=lambda p: p.relative_to(root).as_posix()):
        h.update(f"{blob_hash(f)} {f.relative_to(root).as_posix()}\n".encode())
    return h.hexdigest()


def dataset_hash(data: Path) -> str:
    files = [p for p in data.rglob("*") if p.is_file() and p.name != RUN_FILE]
    return tree_hash(data, files)


def record_run(out: Path, command: str, cfg: RunConfig, seed: int, inputs: dict[str, str],
               outputs: Sequence[str]) -> None:
    """Merge this command's provenance entry into ``out/run.json``."""
    path = out / RUN_FILE
    runs = json.loads(path.read_text()) if path.exists() else {}
    runs[command] = {
        "config_sha256": cfg.digest(),
        "seed": seed,
        "inputs": dict(sorted(inputs.items())),
        "outputs": {name: blob_hash(out / name) for name in sorted(outputs)},
        "version": __version__,
    }
    path.write_text(json.dumps(runs, indent=2, sort_keys=True) + "\n")


def write_metrics(out: Path, stage: str, records: Iterable[dict]) -> None:
    """Replace ``stage``'s lines in ``metrics.jsonl``, keeping other stages' lines in order."""
    path = out / METRICS_FILE
    kept = []
    if path.exists():
        kept = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln).get("stage") != stage]
    new = [json.dumps({"stage": stage, **r}, sort_keys=True) for r in records]
    path.write_text("".join(ln + "\n" for ln in kept + new))


# -- loading ----------------------------------------------------------------------------------

def _load_split(data: Path, split: str) -> list[SynthStudy]:
    try:
        studies = load_dataset(data, split)
    except (OSError, ValueError, KeyError) as err:
        raise DataError(f"cannot read dataset under {data}: {err}") from err
    if not studies:
        raise DataError(f"dataset {data} has no {split!r} studies")
    return studies


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path} (run the command that produces it first)")
    return path


def _load_vocab(out: Path) -> Vocabulary:
    try:
        return Vocabulary.load(_require(out / VOCAB_FILE, "vocabulary"))
    except ValueError as err:
        raise DataError(f"{out / VOCAB_FILE}: {err}") from err


def _load_codec(out: Path) -> C.CodecParams:
    try:
        return C.load_codec(_require(out / CODEC_FILE, "codec checkpoint"))
    except (ValueError, EOFError) as err:
        raise DataError(f"{out / CODEC_FILE}: {err}") from err


def _load_model(out: Path) -> Mo.ModelParams:
    try:
        return Mo.load_model(_require(out / MODEL_FILE, "model checkpoint"))
    except (ValueError, EOFError) as err:
        raise DataError(f"{out / MODEL_FILE}: {err}") from err


def _check_compatible(cfg: RunConfig, codec: C.CodecParams) -> None:
    if codec.config.image_side != cfg.data.image_side:
        raise ConfigError(f"data.image_side = {cfg.data.image_side} but the codec was trained on "
                          f"{codec.config.image_side} px images")


# -- commands ---------------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> list[str]:
    out = args.out
    manifest = out / "manifest.jsonl"
    if manifest.exists():
        if not args.overwrite:
            raise DataError(f"{manifest} already exists; pass --overwrite or choose a fresh directory")
        manifest.unlink()
        for sub in ("images", "reports"):
            shutil.rmtree(out / sub, ignore_errors=True)
    d = cfg.data
    train = generate_dataset(d.n_train, d.image_side, d.view_weights, d.omission_prob,
                             stage_seed(args.seed, "synth-train"), d.jitter, prefix="train")
    test = generate_dataset(d.n_test, d.image_side, TEST_SPLIT_VIEWS, d.omission_prob,
                            stage_seed(args.seed, "synth-test"), d.jitter, prefix="test")
    save_dataset(train, out, "train")
    if test:
        save_dataset(test, out, "test")
    log.info("wrote %d train and %d test studies to %s", len(train), len(test), out)
    record_run(out, "synth", cfg, args.seed, {}, ["manifest.jsonl"])
    return ["manifest.jsonl"]


def cmd_train_bpe(args, cfg: RunConfig) -> list[str]:
    studies = _load_split(args.data, "train")
    vocab = train_bpe([s.report for s in studies], cfg.bpe.vocab_size, cfg.bpe.min_frequency)
    vocab.save(args.out / VOCAB_FILE)
    log.info("vocabulary: %d ids (%d merges)", vocab.size, len(vocab.merges))
    record_run(args.out, "train-bpe", cfg, args.seed, {"data": dataset_hash(args.data)}, [VOCAB_FILE])
    return [VOCAB_FILE]


def cmd_train_codec(args, cfg: RunConfig) -> list[str]:
    from .plotting import plot_loss_curve

    studies = _load_split(args.data, "train")
    images = np.array([img for s in studies for img in s.images])
    seed = stage_seed(args.seed, "codec")
    limit = cfg.codec.train_images
    if limit and limit < len(images):
        pick = np.sort(np.random.default_rng([seed, 1]).choice(len(images), limit, replace=False))
        images = images[pick]
    codec_cfg = cfg.codec_config(seed)
    try:
        params = C.train_codec(images, codec_cfg)
    except ValueError as err:
        raise DataError(f"codec training data: {err}") from err
    C.save_codec(params, args.out / CODEC_FILE)
    sample = images[: min(len(images), 256)]
    mse = float(np.mean((C.reconstruct(params, sample) - sample) ** 2))
    summary = {"kind": "summary", "reconstruction_mse": mse,
               "round_trip": C.token_round_trip_rate(params, list(sample)),
               "codes_used": int(np.unique(C.encode_images(params, sample)).size)}
    write_metrics(args.out, "train-codec", [{"kind": "epoch", **r} for r in params.history] + [summary])
    plot_loss_curve(params.history, args.out / "codec_loss.png", key="total", title="codec loss per epoch")
    log.info("codec: reconstruction MSE %.5f on %d images", mse, len(sample))
    outputs = [CODEC_FILE, METRICS_FILE, "codec_loss.png"]
    record_run(args.out, "train-codec", cfg, args.seed, {"data": dataset_hash(args.data)}, outputs)
    return outputs


def cmd_train_model(args, cfg: RunConfig) -> list[str]:
    from .plotting import plot_loss_curve

    vocab, codec = _load_vocab(args.out), _load_codec(args.out)
    _check_compatible(cfg, codec)
    studies = encode_studies(_load_split(args.data, "train"), codec, vocab)
    seed = stage_seed(args.seed, "model")
    try:
        params = Mo.init_model(cfg.model_config(vocab.size, seed))
    except ValueError as err:
        raise ConfigError(str(err)) from err
    Mo.train(params, studies, cfg.train_config(seed),
             progress=lambda r: log.info("epoch %d nll %.4f", r["epoch"], r["nll"]))
    Mo.save_model(params, args.out / MODEL_FILE)
    write_metrics(args.out, "train-model", [{"kind": "epoch", **r} for r in params.history])
    plot_loss_curve(params.history, args.out / "loss_curve.png")
    outputs = [MODEL_FILE, METRICS_FILE, "loss_curve.png"]
    inputs = {"data": dataset_hash(args.data), VOCAB_FILE: blob_hash(args.out / VOCAB_FILE),
              CODEC_FILE: blob_hash(args.out / CODEC_FILE)}
    record_run(args.out, "train-model", cfg, args.seed, inputs, outputs)
    return outputs


def _find_study(data: Path, study_id: str) -> SynthStudy:
    try:
        studies = load_dataset(data)
    except (OSError, ValueError, KeyError) as err:
        raise DataError(f"cannot read dataset under {data}: {err}") from err
    for s in studies:
        if s.study_id == study_id:
            return s
    raise DataError(f"study {study_id!r} not found in {data / 'manifest.jsonl'}")


def cmd_generate(args, cfg: RunConfig) -> list[str]:
    vocab, codec, params = _load_vocab(args.out), _load_codec(args.out), _load_model(args.out)
    _check_compatible(cfg, codec)
    raw = _find_study(args.data, args.study)
    study = encode_studies([raw], codec, vocab)[0]
    sampler = cfg.sampler_config(stage_seed(args.seed, "generate"))
    gen_dir = args.out / "generated"
    gen_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.report:
        if not study.images:
            raise DataError(f"study {args.study!r} has no images to condition a report on")
        rep = generate_report(params, study, sampler, vocab)
        name = f"generated/{raw.study_id}_report.txt"
        (args.out / name).write_text(rep.text + "\n", encoding="utf-8")
        print(rep.text)
        if rep.truncated:
            log.warning("report hit the %d-token budget and was truncated", params.config.text_len)
        outputs.append(name)
    else:
        target = View.parse(args.target_view)
        if target in raw.views:
            log.info("study already has a %s view; regenerating it", target.value)
        grid = generate_view(params, study, target, sampler)
        stem = f"generated/{raw.study_id}_{target.value}"
        (args.out / f"{stem}.grid").write_text(C.format_grid(grid))
        write_pgm(args.out / f"{stem}.pgm", C.decode_tokens(codec, grid))
        print(C.format_grid(grid), end="")
        outputs += [f"{stem}.grid", f"{stem}.pgm"]
    inputs = {"data": dataset_hash(args.data), MODEL_FILE: blob_hash(args.out / MODEL_FILE)}
    record_run(args.out, "generate", cfg, args.seed, inputs, outputs)
    return outputs


def cmd_evaluate(args, cfg: RunConfig) -> list[str]:
    from .plotting import plot_paired, plot_samples

    conditions = parse_conditions(args.conditions) if args.conditions else list(cfg.eval.conditions)
    vocab, codec, params = _load_vocab(args.out), _load_codec(args.out), _load_model(args.out)
    _check_compatible(cfg, codec)
    raw = _load_split(args.data, "test")
    studies = encode_studies(raw, codec, vocab)
    sampler = cfg.sampler_config(stage_seed(args.seed, "evaluate"))
    try:
        result = evaluate(params, studies, [s.report for s in raw], vocab, conditions, sampler,
                          bootstrap_seed=stage_seed(args.seed, "bootstrap"), resamples=cfg.eval.resamples,
                          alpha=cfg.eval.alpha)
    except ValueError as err:
        raise DataError(f"evaluation on {args.data}: {err}") from err

    records: list[dict] = [{"kind": "study", **r} for r in result.records]
    for cond in conditions:
        scores = result.scores(cond)
        metric = "token_accuracy" if cond in IMAGE_CONDITIONS else "bleu4"
        records.append({"kind": "summary", "condition": cond, "metric": metric,
                        "mean": float(scores.mean()), "n": int(scores.size)})
    real_frontal = np.array([next(img for v, img in zip(s.views, s.images) if v.is_frontal) for s in raw])
    decoded = {}
    for cond in conditions:
        if cond in IMAGE_CONDITIONS:
            decoded[cond] = C.decode_grids(codec, np.array(result.grids[cond]))
            if len(raw) >= 2:
                fd = frechet_distance(FeatureStats.from_features(image_features(real_frontal)),
                                      FeatureStats.from_features(image_features(decoded[cond])))
                records.append({"kind": "frechet", "condition": cond, "value": fd, "n": len(raw)})
    for name, res in result.comparisons.items():
        a, b = COMPARISONS[name]
        records.append({"kind": "paired", "comparison": name, "a": a, "b": b, **res.as_dict()})
    write_metrics(args.out, "evaluate", records)

    outputs = [METRICS_FILE]
    if result.comparisons:
        plot_paired({f"{COMPARISONS[k][0]} - {COMPARISONS[k][1]}": v for k, v in result.comparisons.items()},
                    args.out / "paired_ci.png")
        outputs.append("paired_ci.png")
    if decoded:
        k = min(cfg.eval.sample_figures, len(raw))
        rows = {"real frontal": real_frontal[:k]}
        rows.update({c: d[:k] for c, d in decoded.items()})
        rows["lateral (context)"] = np.array([next(img for v, img in zip(s.views, s.images)
                                                   if v is View.LATERAL) for s in raw[:k]])
        plot_samples(rows, args.out / "samples.png")
        outputs.append("samples.png")
    for rec in records:
        if rec["kind"] == "paired":
            print(json.dumps({k: rec[k] for k in ("comparison", "a", "b", "mean_difference", "ci_low",
                                                  "ci_high", "n")}, sort_keys=True))
    inputs = {"data": dataset_hash(args.data), MODEL_FILE: blob_hash(args.out / MODEL_FILE),
              CODEC_FILE: blob_hash(args.out / CODEC_FILE), VOCAB_FILE: blob_hash(args.out / VOCAB_FILE)}
    record_run(args.out, "evaluate", cfg, args.seed, inputs, outputs)
    return outputs


COMMANDS = {
    "synth": cmd_synth,
    "train-bpe": cmd_train_bpe,
    "train-codec": cmd_train_codec,
    "train-model": cmd_train_model,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viewgen", description="Multi-view image/report generation at desk scale.")
    parser.add_argument("--version", action="version", version=f"viewgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_data=True):
        p.add_argument("--config", default="desk", help="config file or preset name (desk, paper)")
        if needs_data:
            p.add_argument("--data", type=Path, required=True, help="dataset directory")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0, help="run seed; all randomness derives from it")
        p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = sub.add_parser("synth", help="render a synthetic multi-view dataset")
    common(p, needs_data=False)
    p.add_argument("--overwrite", action="store_true", help="replace an existing dataset in --out")
    common(sub.add_parser("train-bpe", help="train the byte-level BPE vocabulary"))
    common(sub.add_parser("train-codec", help="train the VQ image codec"))
    common(sub.add_parser("train-model", help="train the sequence model"))
    p = sub.add_parser("generate", help="generate one view or a report for a study")
    common(p)
    p.add_argument("--study", required=True, help="study id from the manifest")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--target-view", help="view to generate (AP, PA or LATERAL)")
    mode.add_argument("--report", action="store_true", help="generate the report instead of a view")
    p = sub.add_parser("evaluate", help="paired evaluation of conditioning conditions")
    common(p)
    p.add_argument("--conditions", help="comma-separated subset of report-only, report+1view, 1view, 2view")
    return parser


def _apply_thread_limit() -> None:
    raw = os.environ.get("VXG_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"VXG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"VXG_THREADS must be a positive integer, got {raw!r}")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        _apply_thread_limit()
        cfg = load(args.config)
        if args.command == "generate" and args.target_view:
            View.parse(args.target_view)
        if args.command == "evaluate" and args.conditions:
            parse_conditions(args.conditions)
        if getattr(args, "data", None) is not None and not args.data.is_dir():
            raise DataError(f"data directory {args.data} does not exist")
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        dump = _dump_state(args.out, args.command, err.state)
        print(f"diverged: {err}" + (f" (state dumped to {dump})" if dump else ""), file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _dump_state(out: Path, command: str, state) -> Path | None:
    if state is None:
        return None
    path = out / f"diverged-{command}.bin"
    if isinstance(state, C.CodecParams):
        C.save_codec(state, path)
    elif isinstance(state, Mo.ModelParams):
        Mo.save_model(state, path)
    else:
        return None
    return path


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
