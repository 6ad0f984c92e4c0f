"""Command-line driver: simulate, optimize, train, eval, stats, compare, experiment, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import tomli

from . import __version__
from .body_model import default_body_model
from .camera import project
from .metrics import (
    DEFAULT_ALPHAS,
    MetricError,
    NoShotBoundaryError,
    aggregate_cross_shot,
    gt_keypoints,
    pck_counts,
    pooled_errors,
    report_from_counts,
)
from .neural import (
    MODEL_KINDS,
    NetConfig,
    NeuralError,
    NonFiniteLossError,
    TemporalModelWeights,
    TrainConfig,
    predict_sequence,
    targets_from_estimate,
    train,
    write_loss_curve,
)
from .objectives import MODES, NonFiniteEnergyError
from .scene_sim import (
    TRACKLET_MODES,
    DatasetFormatError,
    MotionConfig,
    SequenceDataset,
    ShotConfig,
    assemble_tracklets,
    generate_sequence,
    read_dataset,
    two_shot_scene,
    write_dataset,
)
from .solver import SolverConfig, read_estimates, solve, write_estimates

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ------------------------------------------------------------------ helpers


def _dashless(name: str) -> str:
    return name.replace("-", "_")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        with p.open("rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise DataError(f"{p}: config file not found") from None
    except tomli.TOMLDecodeError as e:
        raise DataError(f"{p}: invalid TOML: {e}") from None


def _section(cfg: dict, name: str, path: str | None) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise DataError(f"{path}: [{name}] must be a table")
    return sec


def _build(cls, kwargs: dict, where: str):
    try:
        if hasattr(cls, "from_dict"):
            return cls.from_dict(kwargs)
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise DataError(f"{where}: {e}") from None


def _read_data(path: str) -> SequenceDataset:
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise DataError(f"{path}: dataset not found") from None
    except DatasetFormatError as e:
        raise DataError(f"{path}: {e}") from None


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict
    outputs: list
    tool_version: str = __version__
    wall_time_s: float = 0.0
    argv: list = field(default_factory=list)

    def write(self, artifact: Path) -> Path:
        path = artifact.with_name(artifact.name + ".manifest.json")
        _atomic_write(path, json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map; results do not depend on ``jobs``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _parse_alphas(text: str) -> tuple[float, ...]:
    try:
        alphas = tuple(float(a) for a in text.split(",") if a.strip())
    except ValueError:
        raise UsageError(f"--alphas must be comma-separated numbers, got {text!r}") from None
    if not alphas or any(a <= 0 for a in alphas):
        raise UsageError("--alphas must list positive thresholds")
    return alphas


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    _atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------- simulate


class _SimJob:
    def __init__(self, motion: MotionConfig, shots: ShotConfig, noise: float):
        self.motion, self.shots, self.noise = motion, shots, noise

    def __call__(self, index: int):
        return generate_sequence(default_body_model(), index, self.motion, self.shots, self.noise)


def cmd_simulate(args) -> dict:
    cfg = load_config(args.config)
    motion_kw = dict(_section(cfg, "motion", args.config))
    motion_kw["rng_seed"] = args.seed
    motion = _build(MotionConfig, motion_kw, f"{args.config}: [motion]")
    shot_kw = {k: tuple(v) if isinstance(v, list) else v for k, v in _section(cfg, "shots", args.config).items()}
    shots = _build(ShotConfig, shot_kw, f"{args.config}: [shots]")
    sim = _section(cfg, "simulate", args.config)
    n = int(sim.get("n_sequences", 8))
    noise = float(sim.get("noise_sigma_px", 2.0))
    if n < 1:
        raise DataError(f"{args.config}: [simulate] n_sequences must be >= 1")
    seqs = _map(_SimJob(motion, shots, noise), list(range(n)), args.jobs)
    config = json.loads(json.dumps({
        "motion": asdict(motion), "shots": asdict(shots), "noise_sigma_px": noise,
        "n_sequences": n, "seed": args.seed,
    }))
    out = Path(args.out)
    write_dataset(SequenceDataset(tuple(seqs), config), out)
    return {"config": config, "seed": args.seed, "inputs": {"config": args.config}, "outputs": [str(out)]}


# ---------------------------------------------------------------- optimize


class _SolveJob:
    def __init__(self, cfg: SolverConfig):
        self.cfg = cfg

    def __call__(self, seq):
        return solve(seq, self.cfg, default_body_model())


def _solver_config(args) -> SolverConfig:
    cfg = load_config(args.config)
    kw = dict(_section(cfg, "solver", args.config))
    kw["mode"] = _dashless(args.mode)
    kw["seed"] = args.seed
    return _build(SolverConfig, kw, f"{args.config}: [solver]")


def cmd_optimize(args) -> dict:
    scfg = _solver_config(args)
    data = _read_data(args.data)
    model = default_body_model()
    ests = _map(_SolveJob(scfg), list(data.sequences), args.jobs)
    out = Path(args.out)
    write_estimates(out, data.sequences, ests, model, scfg.mode)
    snapshot = json.loads(json.dumps(asdict(scfg)))
    return {"config": snapshot, "seed": args.seed, "inputs": {"data": args.data, "config": args.config},
            "outputs": [str(out)]}


# ------------------------------------------------------------------- train


def _pseudo_gt(data: SequenceDataset, path: str):
    try:
        ests = read_estimates(path)
    except FileNotFoundError:
        raise DataError(f"{path}: estimates not found") from None
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None
    targets = []
    for seq in data.sequences:
        if seq.identity not in ests:
            raise DataError(f"{path}: no estimate for sequence identity {seq.identity}")
        est = ests[seq.identity]
        if len(est.frames) != len(seq):
            raise DataError(f"{path}: identity {seq.identity} has {len(est.frames)} frames, data has {len(seq)}")
        targets.append(targets_from_estimate(est))
    return targets


def cmd_train(args) -> dict:
    cfg = load_config(args.config)
    kw = dict(_section(cfg, "train", args.config))
    kw["seed"] = args.seed
    tcfg = _build(TrainConfig, kw, f"{args.config}: [train]")
    model = default_body_model()
    net = _build(NetConfig, {"joint_count": model.joint_count, "shape_dim": model.shape_dim,
                             **_section(cfg, "net", args.config)}, f"{args.config}: [net]")
    kind = {"single-frame": "single_frame", "conv": "conv", "transformer": "transformer"}[args.model]
    data = _read_data(args.data)
    targets = _pseudo_gt(data, args.pseudo_gt)
    init = None
    if args.init:
        try:
            init = TemporalModelWeights.load(args.init)
        except FileNotFoundError:
            raise DataError(f"{args.init}: weights not found") from None
    res = train(data.sequences, targets, kind, tcfg, model, init=init, net=None if init else net)
    out = Path(args.out)
    res.weights.save(out)
    curve_path = out.with_name(out.stem + ".loss.csv")
    write_loss_curve(res.curve, curve_path)
    return {"config": json.loads(json.dumps({"train": asdict(tcfg), "net": asdict(res.weights.config),
                                             "model": kind})),
            "seed": args.seed,
            "inputs": {"data": args.data, "pseudo_gt": args.pseudo_gt, "config": args.config, "init": args.init},
            "outputs": [str(out), str(curve_path)]}


# -------------------------------------------------------------------- eval


def _estimates_for(data: SequenceDataset, args):
    model = default_body_model()
    if args.weights:
        try:
            w = TemporalModelWeights.load(args.weights)
        except FileNotFoundError:
            raise DataError(f"{args.weights}: weights not found") from None
        return [predict_sequence(seq, w, model, args.window) for seq in data.sequences]
    try:
        ests = read_estimates(args.estimates)
    except FileNotFoundError:
        raise DataError(f"{args.estimates}: estimates not found") from None
    except (KeyError, ValueError) as e:
        raise DataError(f"{args.estimates}: {e}") from None
    out = []
    for seq in data.sequences:
        if seq.identity not in ests:
            raise DataError(f"{args.estimates}: no estimate for sequence identity {seq.identity}")
        out.append(ests[seq.identity])
    return out


def frame_pck_counts(estimates, seqs, model, alphas):
    """PCK of each valid frame's own projection against its in-image ground-truth joints."""
    hits = np.zeros((len(alphas), model.joint_count), dtype=np.int64)
    total = np.zeros(model.joint_count, dtype=np.int64)
    frames = 0
    for est, seq in zip(estimates, seqs):
        X = est.joints(model)
        for i, fr in enumerate(seq.frames):
            if not fr.valid:
                continue
            g = gt_keypoints(seq, i)
            seen = project(fr.gt.x3d, fr.camera)[1] if fr.gt is not None else fr.keypoints[:, 2] > 0
            h, msk = pck_counts(project(X[i], fr.camera)[0], g, seen, alphas)
            hits += h
            total += msk
            frames += 1
    return hits, total, frames


def cmd_eval(args) -> dict:
    alphas = _parse_alphas(args.alphas)
    data = _read_data(args.data)
    model = default_body_model()
    ests = _estimates_for(data, args)
    out = Path(args.out)
    if args.metric in ("pck", "cross-shot-pck"):
        if args.metric == "cross-shot-pck":
            rep = aggregate_cross_shot(ests, data.sequences, model, alphas)
        else:
            rep = report_from_counts(*frame_pck_counts(ests, data.sequences, model, alphas), alphas)
        _write_rows(out, ["alpha", "pck", "pairs"], rep.rows())
    else:
        if not all(seq.has_gt for seq in data.sequences):
            raise DataError(f"{args.data}: 3D metrics need ground truth")
        mp, pa = pooled_errors(ests, data.sequences, model)
        value = mp if args.metric == "mpjpe" else pa
        frames = int(sum(seq.arrays.valid.sum() for seq in data.sequences))
        _write_rows(out, ["metric", "value_mm", "frames"], [(args.metric, value, frames)])
    return {"config": {"metric": args.metric, "alphas": list(alphas)}, "seed": None,
            "inputs": {"data": args.data, "estimates": args.estimates, "weights": args.weights},
            "outputs": [str(out)]}


# ------------------------------------------------------------------- stats


def cmd_stats(args) -> dict | None:
    data = _read_data(args.data)
    modes = [_dashless(args.mode)] if args.mode else list(TRACKLET_MODES)
    rows = []
    for mode in modes:
        _, st = assemble_tracklets(data.sequences, mode, args.long_threshold)
        rows.append((mode, st.count_all, st.count_long, st.length_all, st.length_long))
    header = ["mode", "count_all", "count_long", "length_all", "length_long"]
    text = ",".join(header) + "\n" + "".join(",".join(str(v) for v in r) + "\n" for r in rows)
    if args.out:
        out = Path(args.out)
        _atomic_write(out, text)
        return {"config": {"modes": modes, "long_threshold": args.long_threshold}, "seed": None,
                "inputs": {"data": args.data}, "outputs": [str(out)]}
    sys.stdout.write(text)
    return None


# ----------------------------------------------------------------- compare


def _read_report(path: str) -> list[dict]:
    try:
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise DataError(f"{path}: report not found") from None
    if not rows:
        raise DataError(f"{path}: empty report")
    for col in ("alpha", "pck"):
        if col not in rows[0]:
            raise DataError(f"{path}: report missing column {col!r}")
    return rows


def compare_reports(rows_a: list[dict], rows_b: list[dict]) -> list[tuple]:
    """Per alpha: mean of each report, mean paired difference, wins of A, number of pairs.

    Rows pair on ``(seed, alpha)`` when both reports carry a seed column, on alpha otherwise.
    """
    def key(r):
        return (r.get("seed", ""), float(r["alpha"]))

    a = {key(r): float(r["pck"]) for r in rows_a}
    b = {key(r): float(r["pck"]) for r in rows_b}
    common = sorted(set(a) & set(b))
    if not common:
        raise DataError("reports share no (seed, alpha) rows")
    out = []
    for alpha in sorted({k[1] for k in common}):
        ks = [k for k in common if k[1] == alpha]
        da = np.array([a[k] for k in ks])
        db = np.array([b[k] for k in ks])
        out.append((alpha, float(da.mean()), float(db.mean()), float((da - db).mean()),
                    int(np.sum(da > db)), len(ks)))
    return out


def cmd_compare(args) -> dict | None:
    rows = compare_reports(_read_report(args.report_a), _read_report(args.report_b))
    header = ["alpha", "mean_a", "mean_b", "mean_diff", "wins_a", "pairs"]
    if args.out:
        out = Path(args.out)
        _write_rows(out, header, rows)
        return {"config": {}, "seed": None, "inputs": {"report_a": args.report_a, "report_b": args.report_b},
                "outputs": [str(out)]}
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return None


# ------------------------------------------------------- experiments/report


RESULT_COLUMNS = ("table", "seed", "row", "alpha", "pck")


def emit_report(results: Sequence[dict], out_dir) -> list[Path]:
    """Comparison tables (one CSV per table, rows by label, mean PCK per alpha) and a summary.

    ``results`` are records with keys ``table, seed, row, alpha, pck``.
    The summary lists per-seed values, means and, for each alpha, the
    ordering of rows by mean with the number of seeds that agree with it.
    """
    if not results:
        raise DataError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    lines = []
    tables = sorted({r["table"] for r in results})
    for table in tables:
        recs = [r for r in results if r["table"] == table]
        rows = list(dict.fromkeys(r["row"] for r in recs))
        alphas = sorted({float(r["alpha"]) for r in recs})
        seeds = sorted({int(r["seed"]) for r in recs})
        val = {(r["row"], float(r["alpha"]), int(r["seed"])): float(r["pck"]) for r in recs}
        means = {(row, a): float(np.mean([val[(row, a, s)] for s in seeds if (row, a, s) in val]))
                 for row in rows for a in alphas}
        path = out_dir / f"{table}.csv"
        _write_rows(path, ["row"] + [f"pck@{a:g}" for a in alphas],
                    [[row] + [means[(row, a)] for a in alphas] for row in rows])
        written.append(path)
        lines.append(f"== {table} ({len(seeds)} seeds)")
        for a in alphas:
            order = sorted(rows, key=lambda row: -means[(row, a)])
            agree = sum(
                all(val.get((order[i], a, s), np.nan) > val.get((order[i + 1], a, s), np.nan)
                    for i in range(len(order) - 1))
                for s in seeds
            )
            lines.append(f"alpha={a:g}: " + " > ".join(f"{row} ({means[(row, a)]:.2f})" for row in order)
                         + f"; strict per-seed agreement {agree}/{len(seeds)}")
        for s in seeds:
            lines.append(f"  seed {s}: " + ", ".join(
                f"{row}=" + "/".join(f"{val[(row, a, s)]:.1f}" for a in alphas if (row, a, s) in val)
                for row in rows))
    summary = out_dir / "summary.txt"
    _atomic_write(summary, "\n".join(lines) + "\n")
    written.append(summary)
    return written


def read_results(path: str) -> list[dict]:
    try:
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise DataError(f"{path}: results not found") from None
    for r in rows:
        missing = [c for c in RESULT_COLUMNS if c not in r]
        if missing:
            raise DataError(f"{path}: results row missing {missing}")
    return rows


def write_results(path: Path, results: Sequence[dict]) -> None:
    _write_rows(path, RESULT_COLUMNS, [[r[c] for c in RESULT_COLUMNS] for r in results])


class _ModesJob:
    def __init__(self, frames_per_shot: int, missing_prob: float, alphas, scfg: dict):
        self.frames_per_shot, self.missing_prob, self.alphas, self.scfg = frames_per_shot, missing_prob, alphas, scfg

    def __call__(self, seed: int) -> list[dict]:
        model = default_body_model()
        seq = two_shot_scene(model, seed, self.frames_per_shot, truncated_shot=1, missing_prob=self.missing_prob)
        out = []
        for mode in MODES:
            est = solve(seq, SolverConfig.from_dict({**self.scfg, "mode": mode, "seed": seed}), model)
            rep = aggregate_cross_shot([est], [seq], model, self.alphas)
            out += [{"table": "modes", "seed": seed, "row": mode, "alpha": a, "pck": p}
                    for a, p in zip(rep.alphas, rep.pck)]
        return out


def mode_comparison(seeds: Sequence[int], alphas=DEFAULT_ALPHAS, frames_per_shot: int = 10,
                    missing_prob: float = 0.1, solver: dict | None = None, jobs: int = 1) -> list[dict]:
    """Cross-shot PCK of the three solver modes on two-shot scenes whose second shot is a close-up."""
    job = _ModesJob(frames_per_shot, missing_prob, tuple(alphas), dict(solver or {}))
    return [r for rows in _map(job, list(seeds), jobs) for r in rows]


def cmd_experiment(args) -> dict:
    alphas = _parse_alphas(args.alphas)
    cfg = load_config(args.config)
    seeds = list(range(args.seed, args.seed + args.seeds))
    results = mode_comparison(seeds, alphas, args.frames_per_shot, args.missing_prob,
                              _section(cfg, "solver", args.config), args.jobs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    res_path = out_dir / "results.csv"
    write_results(res_path, results)
    written = emit_report(results, out_dir)
    return {"config": {"seeds": seeds, "alphas": list(alphas), "frames_per_shot": args.frames_per_shot,
                       "missing_prob": args.missing_prob, "solver": _section(cfg, "solver", args.config)},
            "seed": args.seed, "inputs": {"config": args.config},
            "outputs": [str(res_path)] + [str(p) for p in written]}


def cmd_report(args) -> dict:
    results = read_results(args.results)
    written = emit_report(results, args.out_dir)
    return {"config": {}, "seed": None, "inputs": {"results": args.results},
            "outputs": [str(p) for p in written]}


# --------------------------------------------------------------- dispatch


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="multishot", description="Multi-shot body pose recovery on synthetic data.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("optimize", help="fit every sequence of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", required=True, choices=["single-frame", "single-shot", "multi-shot"])
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("train", help="train a regressor on pseudo ground truth")
    s.add_argument("--data", required=True)
    s.add_argument("--pseudo-gt", required=True)
    s.add_argument("--model", required=True, choices=["single-frame", "transformer", "conv"])
    s.add_argument("--config")
    s.add_argument("--init", help="starting weights (e.g. a single-frame model for a temporal one)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("eval", help="score estimates or a trained model")
    s.add_argument("--data", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--estimates")
    src.add_argument("--weights")
    s.add_argument("--window", type=int, default=16)
    s.add_argument("--metric", required=True, choices=["pck", "cross-shot-pck", "mpjpe", "pa-mpjpe"])
    s.add_argument("--alphas", default=",".join(str(a) for a in DEFAULT_ALPHAS))
    s.add_argument("--out", required=True)

    s = sub.add_parser("stats", help="tracklet counts and lengths")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=["single-shot", "continuous-identity", "multi-shot"])
    s.add_argument("--long-threshold", type=int, default=20)
    s.add_argument("--out")

    s = sub.add_parser("compare", help="paired summary of two PCK reports")
    s.add_argument("--report-a", required=True)
    s.add_argument("--report-b", required=True)
    s.add_argument("--out")

    s = sub.add_parser("experiment", help="three-mode comparison over seeds, with report")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--frames-per-shot", type=int, default=10)
    s.add_argument("--missing-prob", type=float, default=0.1)
    s.add_argument("--alphas", default=",".join(str(a) for a in DEFAULT_ALPHAS))
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("report", help="tables and summary from a results CSV")
    s.add_argument("--results", required=True)
    s.add_argument("--out-dir", required=True)
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "train": cmd_train,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "compare": cmd_compare,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        t0 = time.perf_counter()
        info = COMMANDS[args.command](args)
        if info is not None:
            manifest = RunManifest(args.command, info["config"], info["seed"], info["inputs"], info["outputs"],
                                   wall_time_s=time.perf_counter() - t0, argv=argv)
            manifest.write(Path(info["outputs"][0]))
        return EXIT_OK
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteEnergyError, NonFiniteLossError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MetricError, NeuralError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror or e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
