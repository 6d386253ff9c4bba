"""Command-line entry point: ``cxrdr <subcommand> ...``.

Every subcommand stages its results in a temporary sibling of the target and
renames it into place on success, and writes a manifest JSON recording the
command line, the effective config (plus its hash), seeds, input digests and
output digests.

Exit codes: 0 success, 1 processing error, 2 usage error (argparse),
3 missing input, 4 malformed config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, fields
from pathlib import Path
from typing import Callable, Optional

from . import __version__
from .cnn import CnnConfig, build_network, samples_to_batch, train
from .eda import eda_tables, format_metadata_csv, parse_jsrt_clinical, read_metadata
from .harness import run_experiment, split
from .imaging import RawLayout, encode_pgm, load_mask, mask_to_image, read_pgm, read_raw_file
from .preprocess import DatasetVariant, Sample, build_variant
from .synth import generate_dataset, write_corpus
from .tsne import TsneConfig, exclusion_list, outlier_scores, run_tsne, vectorize_masks

log = logging.getLogger("cxrdr")

OUTPUT_ROOT_ENV = "CXRDR_OUTPUT_ROOT"
EXIT_ERROR, EXIT_USAGE, EXIT_MISSING_INPUT, EXIT_BAD_CONFIG = 1, 2, 3, 4

CONFIG_SECTIONS = {"cnn", "tsne", "harness", "raw_layout", "mask_side", "mask_threshold", "output_root"}
HARNESS_DEFAULTS = {"epochs": 60, "val_fraction": 0.2, "span": 0.3, "degree": 2}


class MissingInput(Exception):
    pass


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    unknown = set(data) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"{p}: unknown config keys {sorted(unknown)}")
    return data


def _section(config: dict, name: str, cls):
    raw = config.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"config section {name!r}: unknown keys {sorted(unknown)}")
    return raw


def _build(cls, values: dict, what: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what} config: {exc}") from None


def cnn_config(config: dict, **overrides) -> CnnConfig:
    values = {**_section(config, "cnn", CnnConfig), **{k: v for k, v in overrides.items() if v is not None}}
    return _build(CnnConfig, values, "cnn")


def tsne_config(config: dict, **overrides) -> TsneConfig:
    values = {**_section(config, "tsne", TsneConfig), **{k: v for k, v in overrides.items() if v is not None}}
    return _build(TsneConfig, values, "tsne")


def raw_layout(config: dict, **overrides) -> RawLayout:
    values = {**_section(config, "raw_layout", RawLayout), **{k: v for k, v in overrides.items() if v is not None}}
    return _build(RawLayout, values, "raw_layout")


def harness_settings(config: dict) -> dict:
    raw = config.get("harness", {})
    if not isinstance(raw, dict) or set(raw) - set(HARNESS_DEFAULTS):
        raise ConfigError(f"config section 'harness' accepts only {sorted(HARNESS_DEFAULTS)}")
    return {**HARNESS_DEFAULTS, **raw}


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


# ---------------------------------------------------------------------------
# paths, digests, atomic output
# ---------------------------------------------------------------------------


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def path_digest(path: Path) -> str:
    if path.is_file():
        return file_digest(path)
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(path)).encode())
            h.update(file_digest(p).encode())
    return h.hexdigest()


def resolve_output(out: str, config: dict) -> Path:
    p = Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV) or config.get("output_root")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def require(path: Optional[str], what: str, kind: str = "any") -> Path:
    if path is None:
        raise MissingInput(f"{what} is required")
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.is_file() if kind == "file" else p.exists()
    if not ok:
        raise MissingInput(f"{what} not found: {p}")
    return p


class Run:
    """Collects manifest fields while a subcommand executes."""

    def __init__(self, args, config: dict):
        self.args = args
        self.config = config
        self.seeds: list[int] = []
        self.inputs: dict[str, str] = {}
        self.effective: dict = {}

    def input(self, path: Path) -> Path:
        self.inputs[str(path)] = path_digest(path)
        return path

    def manifest(self, outputs: dict[str, str]) -> dict:
        effective = {"file": self.config, **self.effective}
        return {
            "tool": "cxrdr",
            "version": __version__,
            "command": self.args.command,
            "argv": self.args.argv,
            "config": effective,
            "config_hash": config_hash(effective),
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": outputs,
        }


def _swap_into_place(staged: Path, target: Path) -> None:
    if target.exists():
        backup = target.with_name(f".{target.name}.old-{os.getpid()}")
        os.replace(target, backup)
        os.replace(staged, target)
        if backup.is_dir():
            shutil.rmtree(backup)
        else:
            backup.unlink()
    else:
        os.replace(staged, target)


def write_dir_atomically(target: Path, run: Run, fill: Callable[[Path], None]) -> None:
    """Run ``fill(tmp_dir)``, add manifest.json, then rename onto ``target``."""
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        fill(tmp)
        outputs = {
            str(p.relative_to(tmp)): file_digest(p) for p in sorted(tmp.rglob("*")) if p.is_file()
        }
        (tmp / "manifest.json").write_text(json.dumps(run.manifest(outputs), indent=2) + "\n")
        _swap_into_place(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def write_file_atomically(target: Path, run: Run, data: bytes) -> None:
    """Write ``target`` and ``<target>.manifest.json`` via temp files and rename."""
    target.parent.mkdir(parents=True, exist_ok=True)
    manifest_path = target.with_name(target.name + ".manifest.json")
    manifest = run.manifest({target.name: hashlib.sha256(data).hexdigest()})
    staged = []
    try:
        for path, payload in ((target, data), (manifest_path, (json.dumps(manifest, indent=2) + "\n").encode())):
            fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            staged.append((Path(tmp), path))
        for tmp, path in staged:
            os.replace(tmp, path)
    except BaseException:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
        raise


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------


def load_pgm_dir(directory: Path) -> dict:
    images = {p.stem: read_pgm(p) for p in sorted(directory.glob("*.pgm"))}
    if not images:
        raise MissingInput(f"no .pgm images in {directory}")
    return images


def load_mask_dir(directory: Path, threshold: int) -> dict:
    return {cid: load_mask(img, min(threshold, img.max_value)) for cid, img in load_pgm_dir(directory).items()}


def read_manifest_csv(path: Path, data_dir: Path) -> list[Sample]:
    lines = path.read_text().strip().splitlines()
    if not lines or lines[0].strip() != "case_id,label,path":
        raise ValueError(f"{path}: expected header 'case_id,label,path'")
    samples = []
    for line in lines[1:]:
        case_id, label, rel = line.split(",")
        image_path = data_dir / rel
        if not image_path.is_file():
            raise MissingInput(f"manifest entry {case_id}: {image_path} not found")
        samples.append(Sample(case_id, read_pgm(image_path), label))
    return samples


def read_embedding_csv(path: Path) -> dict[str, float]:
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",") if lines else []
    if not header or header[0] != "case_id" or header[-1] != "score":
        raise ValueError(f"{path}: expected columns case_id,...,score")
    return {row.split(",")[0]: float(row.split(",")[-1]) for row in lines[1:]}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, run: Run) -> None:
    run.seeds = [args.seed]
    run.effective = {"n": args.n, "nodule_frac": args.nodule_frac, "outlier_frac": args.outlier_frac, "side": args.side}
    corpus = generate_dataset(args.n, args.nodule_frac, args.outlier_frac, args.seed, args.side)
    write_dir_atomically(resolve_output(args.out, run.config), run, lambda tmp: write_corpus(corpus, tmp))


def cmd_ingest(args, run: Run) -> None:
    layout = raw_layout(run.config)
    run.effective = {"raw_layout": asdict(layout)}
    originals = run.input(require(args.originals, "--originals", "dir"))
    bse = run.input(require(args.bse, "--bse", "dir")) if args.bse else None
    masks = run.input(require(args.masks, "--masks", "dir")) if args.masks else None
    clinical = [run.input(require(c, "--clinical", "file")) for c in args.clinical]

    def convert(src: Path, dst: Path) -> None:
        dst.mkdir()
        found = False
        for p in sorted(src.iterdir()):
            if p.suffix.upper() == ".IMG":
                image = read_raw_file(p, layout)
            elif p.suffix.lower() == ".pgm":
                image = read_pgm(p)
            else:
                continue
            found = True
            (dst / f"{p.stem}.pgm").write_bytes(encode_pgm(image))
        if not found:
            raise MissingInput(f"no .IMG or .pgm files in {src}")

    def fill(tmp: Path) -> None:
        convert(originals, tmp / "originals")
        if bse is not None:
            convert(bse, tmp / "bse")
        if masks is not None:
            (tmp / "masks").mkdir()
            threshold = run.config.get("mask_threshold", 128)
            for cid, m in load_mask_dir(masks, threshold).items():
                (tmp / "masks" / f"{cid}.pgm").write_bytes(encode_pgm(mask_to_image(m)))
        if clinical:
            records = [r for c in clinical for r in parse_jsrt_clinical(c.read_text(errors="replace"))]
            (tmp / "metadata.csv").write_text(format_metadata_csv(sorted(records, key=lambda r: r.case_id)))

    write_dir_atomically(resolve_output(args.out, run.config), run, fill)


def cmd_eda(args, run: Run) -> None:
    records = read_metadata(run.input(require(args.metadata, "--metadata", "file")))
    run.effective = {"bin_width": args.bin_width}
    tables = eda_tables(records, args.bin_width)

    def fill(tmp: Path) -> None:
        for name, text in tables.items():
            (tmp / name).write_text(text)

    write_dir_atomically(resolve_output(args.out, run.config), run, fill)


def cmd_preprocess(args, run: Run) -> None:
    variant = DatasetVariant.parse(args.variant)
    threshold = run.config.get("mask_threshold", 128)
    records = read_metadata(run.input(require(args.metadata, "--metadata", "file")))
    originals = load_pgm_dir(run.input(require(args.originals, "--originals", "dir"))) if variant.needs_originals else None
    bse = load_pgm_dir(run.input(require(args.bse, "--bse", "dir"))) if variant.needs_bse else None
    masks = load_mask_dir(run.input(require(args.masks, "--masks", "dir")), threshold) if variant.needs_masks else None
    excluded: list[str] = []
    if variant is DatasetVariant.V05:
        excluded = run.input(require(args.exclude, "--exclude", "file")).read_text().split()
    run.effective = {"variant": variant.value, "mask_threshold": threshold}
    dataset = build_variant(variant, records, originals, bse, masks, excluded)

    def fill(tmp: Path) -> None:
        (tmp / "images").mkdir()
        rows = ["case_id,label,path"]
        for s in dataset.samples:
            (tmp / "images" / f"{s.case_id}.pgm").write_bytes(encode_pgm(s.image))
            rows.append(f"{s.case_id},{s.label},images/{s.case_id}.pgm")
        (tmp / "manifest.csv").write_text("\n".join(rows) + "\n")
        (tmp / "excluded.txt").write_text("".join(f"{c}\n" for c in dataset.excluded_ids))

    write_dir_atomically(resolve_output(args.out, run.config), run, fill)


def cmd_tsne(args, run: Run) -> None:
    cfg = tsne_config(run.config, perplexity=args.perplexity, seed=args.seed, iterations=args.iterations)
    side = args.side or run.config.get("mask_side", 64)
    threshold = run.config.get("mask_threshold", 128)
    masks = load_mask_dir(run.input(require(args.masks, "--masks", "dir")), threshold)
    run.seeds = [cfg.seed]
    run.effective = {"tsne": cfg.to_dict(), "dims": args.dims, "mask_side": side, "k": args.k}
    ids, x = vectorize_masks(masks, side)
    emb = run_tsne(x, args.dims, cfg, ids)
    scores = outlier_scores(emb, args.k)
    cols = ",".join(f"y{d + 1}" for d in range(args.dims))
    rows = [f"case_id,{cols},score"]
    for cid, y in zip(emb.case_ids, emb.coords):
        rows.append(",".join([cid, *(repr(float(v)) for v in y), repr(scores[cid])]))
    log.info("t-SNE KL %.4f -> %.4f", emb.kl_initial, emb.kl_final)
    write_file_atomically(resolve_output(args.out, run.config), run, ("\n".join(rows) + "\n").encode())


def cmd_filter_outliers(args, run: Run) -> None:
    scores = read_embedding_csv(run.input(require(args.embedding, "--embedding", "file")))
    run.effective = {"fraction": args.fraction}
    ids = exclusion_list(scores, args.fraction)
    log.info("excluding %d of %d cases", len(ids), len(scores))
    write_file_atomically(resolve_output(args.out, run.config), run, "".join(f"{c}\n" for c in ids).encode())


def _dataset_from(args, run: Run) -> list[Sample]:
    data = run.input(require(args.data, "--data", "dir"))
    manifest = Path(args.manifest) if args.manifest else data / "manifest.csv"
    return read_manifest_csv(run.input(require(str(manifest), "manifest", "file")), data)


def _cnn_for(run: Run, samples: list[Sample], seed: Optional[int] = None) -> CnnConfig:
    # Without an explicit input_side the network takes the smallest image side in the data.
    side = None
    if "input_side" not in run.config.get("cnn", {}) and samples:
        side = min(min(s.image.pixels.shape) for s in samples)
    return cnn_config(run.config, seed=seed, input_side=side)


def cmd_train(args, run: Run) -> None:
    settings = harness_settings(run.config)
    samples = _dataset_from(args, run)
    cfg = _cnn_for(run, samples, args.seed)
    epochs = args.epochs if args.epochs is not None else settings["epochs"]
    run.seeds = [cfg.seed]
    run.effective = {"cnn": cfg.to_dict(), "epochs": epochs, "val_fraction": settings["val_fraction"]}
    tr, va = split(samples, settings["val_fraction"], cfg.seed)
    curve = train(
        build_network(cfg),
        samples_to_batch(tr, cfg.input_side, cfg.dtype),
        samples_to_batch(va, cfg.input_side, cfg.dtype),
        epochs,
        run_id=f"seed{cfg.seed}",
    )
    write_file_atomically(resolve_output(args.out, run.config), run, curve.to_csv().encode())


def cmd_experiment(args, run: Run) -> None:
    settings = harness_settings(run.config)
    variant = DatasetVariant.parse(args.variant)
    samples = _dataset_from(args, run)
    cfg = _cnn_for(run, samples)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma-separated integer list, got {args.seeds!r}") from None
    runs = args.runs if args.runs is not None else len(seeds)
    epochs = args.epochs if args.epochs is not None else settings["epochs"]
    run.seeds = seeds
    summary = run_experiment(
        variant, samples, cfg, epochs, runs, seeds, settings["val_fraction"], settings["span"], settings["degree"]
    )
    run.effective = summary.config

    def fill(tmp: Path) -> None:
        (tmp / "runs").mkdir()
        for curve, seed in zip(summary.runs, seeds):
            (tmp / "runs" / f"seed{seed}.csv").write_text(curve.to_csv())
        (tmp / "averaged.csv").write_text(summary.averaged.to_csv())
        (tmp / "smoothed.csv").write_text(summary.smoothed.to_csv())
        brief = {k: v for k, v in summary.to_dict().items() if k not in ("runs", "averaged", "smoothed")}
        (tmp / "summary.json").write_text(json.dumps(brief, indent=2) + "\n")

    log.info("%s: crossing epoch %s, actual accuracy %s", variant.value, summary.crossing_epoch, summary.actual_accuracy)
    write_dir_atomically(resolve_output(args.out, run.config), run, fill)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="cxrdr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cxrdr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic phantom corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--nodule-frac", type=float, default=0.6)
    p.add_argument("--outlier-frac", type=float, default=0.05)
    p.add_argument("--side", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="convert raw radiographs and masks to PGM")
    p.add_argument("--originals", required=True, help="directory of raw .IMG (or .pgm) radiographs")
    p.add_argument("--bse", help="directory of bone-suppressed images (.IMG or .pgm)")
    p.add_argument("--masks", help="directory of lung masks (.pgm)")
    p.add_argument("--clinical", action="append", default=[], help="clinical listing file (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("eda", parents=[common], help="balance, size, subtlety and location tables")
    p.add_argument("--metadata", required=True)
    p.add_argument("--bin-width", type=float, default=5.0)
    p.add_argument("--out", default="eda")
    p.set_defaults(func=cmd_eda)

    p = sub.add_parser("preprocess", parents=[common], help="build one dataset variant")
    p.add_argument("--variant", required=True, help="v01..v05")
    p.add_argument("--metadata", required=True)
    p.add_argument("--originals")
    p.add_argument("--bse")
    p.add_argument("--masks")
    p.add_argument("--exclude", help="exclusion list (one case id per line), v05 only")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("tsne", parents=[common], help="embed lung masks and score outliers")
    p.add_argument("--masks", required=True)
    p.add_argument("--dims", type=int, choices=[2, 3], default=2)
    p.add_argument("--perplexity", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--side", type=int, help="mask vectorisation side (default 64)")
    p.add_argument("--k", type=int, help="neighbours in the outlier score (default min(30, n-1))")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tsne)

    p = sub.add_parser("filter-outliers", parents=[common], help="highest-scoring fraction of cases")
    p.add_argument("--embedding", required=True)
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter_outliers)

    p = sub.add_parser("train", parents=[common], help="one split-and-train run")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", help="case_id,label,path CSV (default DATA/manifest.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", parents=[common], help="repeated runs, averaging, LOESS, crossing read-off")
    p.add_argument("--variant", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest")
    p.add_argument("--runs", type=int)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        run = Run(args, config)
        if args.config:
            run.input(Path(args.config))
        args.func(args, run)
    except MissingInput as exc:
        return _fail(EXIT_MISSING_INPUT, "missing_input", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_BAD_CONFIG, "bad_config", str(exc))
    except (ValueError, OSError) as exc:
        return _fail(EXIT_ERROR, "failed", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
