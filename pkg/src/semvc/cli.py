"""Command-line driver: ``semvc <verb>`` over a run directory.

Layout of a run directory::

    config.json            resolved configuration (written by gen-env)
    model.json             synthetic video model
    policies/              parent/child/flat policy files, one per lambda
    train_log.csv          per-iteration training statistics (subsampled)
    rd_<label>.csv         RD points per method
    modes_<label>.csv      greedy modes chosen per lambda
    oracle_trace.csv       every mode's outcome in trace format
    oracle.csv, gaps.csv   per-lambda optimum and oracle gaps
    bd.csv, bd.txt         Bjontegaard deltas
    rd.svg, report.md
    manifest_<verb>.json   invocation record beside the outputs
"""

from __future__ import annotations

import csv
import functools
import io
import json
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

import semvc
from semvc import agents, baselines, metrics
from semvc.codec_env import SyntheticEnv, gen_model, load_model, save_model, write_trace
from semvc.config import RunConfig, config_hash, load_config, save_config
from semvc.errors import FormatError, LockError, SemvcError
from semvc.mode_space import mode_key, parse_mode_key
from semvc.oracle import exhaustive_search, mode_gap

log = logging.getLogger("semvc")

LOCK_NAME = ".semvc.lock"
LOG_EVERY = 100
TRAIN_LOG_HEADER = ("lambda", "stage", "iteration", "mean_reward", "policy_loss", "value_loss", "entropy", "encodes")
MODES_HEADER = ("label", "lambda", "mode_key", "objective")
GAPS_HEADER = ("label", "lambda", "mode_key", "objective", "oracle_key", "oracle_objective", "gap", "relative_gap")
ORACLE_HEADER = ("lambda", "best_key", "best_objective", "worst_objective")
LABEL_STYLE = {
    "hrl": dict(color="red", marker="o", linestyle="-"),
    "anchor": dict(color="black", marker="s", linestyle="--"),
    "ratecontrol": dict(color="blue", marker="^", linestyle="--"),
    "flatrl": dict(color="green", marker="v", linestyle="-"),
}


def code_version() -> str:
    import hashlib

    digest = hashlib.sha256()
    for path in sorted(Path(semvc.__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return f"{semvc.__version__}+{digest.hexdigest()[:12]}"


def lam_tag(lam: float) -> str:
    return repr(float(lam)).replace(".", "p")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _read_csv(path: Path, header) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(header):
            raise FormatError(f"{path}:1: expected header {','.join(header)}")
        return list(reader)


# --------------------------------------------------------------------------- run context


class Run:
    """One command invocation: resolved config, locked output directory, manifest."""

    def __init__(self, verb: str, config: RunConfig, out: Path):
        self.verb = verb
        self.name = verb
        self.config = config
        self.out = out
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run the producing command first")
        self.inputs[name] = _sha256(p)
        return p

    def wrote(self, path: Path) -> None:
        self.outputs.append(str(path.relative_to(self.out)) if path.is_relative_to(self.out) else str(path))

    def model(self):
        return load_model(self.need("model.json"))


def _sha256(path: Path) -> str:
    import hashlib

    return hashlib.sha256(path.read_bytes()).hexdigest()


@contextmanager
def _lock(out: Path):
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{lock} exists; another command is writing this run directory") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _resolve(config_path, seed, out) -> tuple[RunConfig, Path]:
    if config_path is not None:
        config = load_config(config_path)
    elif out is not None and (Path(out) / "config.json").exists():
        config = load_config(Path(out) / "config.json")
    else:
        config = RunConfig()
    if seed is not None:
        config = config.with_seed(seed)
    out_dir = Path(out) if out is not None else Path(config.out_dir)
    return config, out_dir


def command(verb: str):
    """Attach the shared flags and run the body inside a locked, manifested run."""

    def deco(fn):
        @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="Run configuration (JSON). Defaults to <out>/config.json, then built-in defaults.")
        @click.option("--seed", type=int, default=None, help="Override the configured seed.")
        @click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory.")
        @click.option("--quiet", is_flag=True, help="Only print errors.")
        @functools.wraps(fn)
        def wrapper(config_path, seed, out, quiet, **kwargs):
            logging.basicConfig(level=logging.WARNING if quiet else logging.INFO, format="%(message)s",
                                stream=sys.stderr, force=True)
            config, out_dir = _resolve(config_path, seed, out)
            out_dir.mkdir(parents=True, exist_ok=True)
            run = Run(verb, config, out_dir)
            start = time.perf_counter()
            with _lock(out_dir):
                fn(run, **kwargs)
                manifest = {
                    "verb": run.name,
                    "argv": sys.argv[1:],
                    "config_hash": config_hash(config),
                    "config": config.to_dict(),
                    "code_version": code_version(),
                    "python": platform.python_version(),
                    "numpy": np.__version__,
                    "inputs": run.inputs,
                    "outputs": run.outputs,
                    "wall_clock_s": round(time.perf_counter() - start, 3),
                    **run.extra,
                }
                (out_dir / f"manifest_{run.name}.json").write_text(json.dumps(manifest, indent=2) + "\n")

        return main.command(verb)(wrapper)

    return deco


class _Group(click.Group):
    def main(self, *args, standalone_mode=True, **kwargs):
        try:
            return super().main(*args, standalone_mode=False, **kwargs)
        except click.exceptions.Abort:
            click.echo("error: Aborted: interrupted", err=True)
            sys.exit(1)
        except click.ClickException as exc:
            click.echo(f"error: UsageError: {exc.format_message()}", err=True)
            sys.exit(2)
        except (SemvcError, OSError, ValueError, KeyError) as exc:
            msg = str(exc).splitlines()[0] if str(exc) else ""
            click.echo(f"error: {type(exc).__name__}: {msg}", err=True)
            sys.exit(1)


@click.group(cls=_Group)
@click.version_option(semvc.__version__, prog_name="semvc")
def main():
    """Hierarchical RL mode selection for semantic video coding on a synthetic codec."""


# --------------------------------------------------------------------------- verbs


@command("gen-env")
def gen_env(run: Run):
    """Generate the synthetic video model for the configured seed."""
    model = gen_model(run.config.seed, run.config.gen)
    save_config(run.config, run.path("config.json"))
    save_model(model, run.path("model.json"))
    run.wrote(run.path("config.json"))
    run.wrote(run.path("model.json"))
    log.info("model: %d frames, %dx%d CTUs, ref_rate %.1f", model.num_frames, *model.ctu_grid, model.ref_rate)


@command("train")
def train(run: Run):
    """Train parent and child agents for every lambda in the sweep."""
    model = run.model()
    space = run.config.space
    env = SyntheticEnv(model, space)
    pol_dir = run.path("policies")
    pol_dir.mkdir(exist_ok=True)
    rows = []
    timings = {}
    for lam in run.config.lambdas:
        t0 = time.perf_counter()
        parent, child, tlog = agents.train_hierarchical(env, space, run.config.train_config(lam))
        timings[repr(lam)] = round(time.perf_counter() - t0, 3)
        for role, pol in ((agents.PARENT, parent), (agents.CHILD, child)):
            p = pol_dir / f"{role}_lam{lam_tag(lam)}.txt"
            agents.save_policy(pol, p)
            run.wrote(p)
        rows += _log_rows(lam, tlog)
        log.info("lambda %s: %d encodes, greedy %s", lam, tlog.total_encodes,
                 mode_key(agents.greedy_mode(parent, child, env, space, lam)))
    _write_csv(run.path("train_log.csv"), TRAIN_LOG_HEADER, rows)
    run.wrote(run.path("train_log.csv"))
    run.extra["train_seconds"] = timings


def _log_rows(lam, tlog):
    rows = []
    rs = list(tlog.rows())
    for i, (stage, it, reward, pl, vl, ent, enc) in enumerate(rs):
        last_of_stage = i + 1 == len(rs) or rs[i + 1][0] != stage
        if it % LOG_EVERY == 0 or last_of_stage:
            rows.append((repr(lam), stage, it, repr(reward), repr(pl), repr(vl), repr(ent), enc))
    return rows


def _modes_rows(label, results):
    return [(label, repr(lam), mode_key(mode), repr(agents.objective(out, lam))) for lam, mode, out in results]


@command("eval")
def evaluate(run: Run):
    """Greedy modes of the trained agents, one RD point per lambda."""
    model = run.model()
    space = run.config.space
    env = SyntheticEnv(model, space)
    results = []
    decide = {}
    for lam in run.config.lambdas:
        parent = agents.load_policy(run.need(f"policies/parent_lam{lam_tag(lam)}.txt"))
        child = agents.load_policy(run.need(f"policies/child_lam{lam_tag(lam)}.txt"))
        t0 = time.perf_counter()
        mode = agents.greedy_mode(parent, child, env, space, lam)
        decide[repr(lam)] = time.perf_counter() - t0
        results.append((lam, mode, env.encode_mode(mode)))
    _emit(run, "hrl", results)
    run.extra["decision_seconds"] = decide


def _emit(run: Run, label: str, results) -> None:
    rd = run.path(f"rd_{label}.csv")
    metrics.write_rd_csv(rd, [(label, lam, out.total_rate, out.fidelity) for lam, _, out in results])
    run.wrote(rd)
    modes = run.path(f"modes_{label}.csv")
    _write_csv(modes, MODES_HEADER, _modes_rows(label, results))
    run.wrote(modes)


@command("baseline")
@click.argument("which", type=click.Choice(["anchor", "ratecontrol", "handcrafted", "flatrl"]))
def baseline(run: Run, which: str):
    """Comparison methods: fixed-QP anchor, rate control, hand-crafted maps, flat RL."""
    run.name = f"baseline-{which}"
    model = run.model()
    cfg = run.config
    if which == "anchor":
        _, results = baselines.fixed_qp_sweep(model, cfg.anchor_qps)
        rows = [("anchor", None, out.total_rate, out.fidelity) for _, out in results]
    elif which == "ratecontrol":
        _, anchor = baselines.fixed_qp_sweep(model, cfg.anchor_qps)
        rows = []
        for _, target in anchor:
            _, out = baselines.rate_control_anchor(model, target.total_rate)
            rows.append(("ratecontrol", None, out.total_rate, out.fidelity))
    elif which == "handcrafted":
        rows = []
        for shape in cfg.handcrafted_shapes:
            scheme = baselines.HandcraftedScheme(shape, cfg.curvature, cfg.delta_span)
            for qp in cfg.anchor_qps:
                _, out = baselines.handcrafted_mode(model, qp, scheme)
                rows.append((f"hc_{shape}", None, out.total_rate, out.fidelity))
    else:
        _flat(run, model)
        return
    p = run.path(f"rd_{which}.csv")
    metrics.write_rd_csv(p, rows)
    run.wrote(p)


def hrl_budgets(run: Run) -> dict:
    """Encodes hierarchical training spent per lambda, read from its log."""
    budgets: dict = {}
    for row in _read_csv(run.need("train_log.csv"), TRAIN_LOG_HEADER):
        lam = float(row["lambda"])
        budgets[lam] = max(budgets.get(lam, 0), int(row["encodes"]))
    return budgets


def _flat(run: Run, model) -> None:
    cfg = run.config
    space = cfg.space
    env = SyntheticEnv(model, space)
    budgets = hrl_budgets(run) if cfg.flat_budget is None else {}
    pol_dir = run.path("policies")
    pol_dir.mkdir(exist_ok=True)
    results = []
    spent = {}
    for lam in cfg.lambdas:
        budget = cfg.flat_budget if cfg.flat_budget is not None else budgets.get(lam)
        if budget is None:
            raise FormatError(f"train_log.csv has no rows for lambda {lam}")
        policy, tlog, mode = baselines.train_flat_rl(env, space, cfg.train_config(lam), budget)
        p = pol_dir / f"flat_lam{lam_tag(lam)}.txt"
        agents.save_policy(policy, p)
        run.wrote(p)
        spent[repr(lam)] = tlog.total_encodes
        results.append((lam, mode, env.encode_mode(mode)))
    _emit(run, "flatrl", results)
    run.extra["flat_encodes"] = spent


@command("oracle")
def oracle(run: Run):
    """Exhaustive search per lambda; gaps for every evaluated method present."""
    model = run.model()
    space = run.config.space
    env = SyntheticEnv(model, space)
    results = {lam: exhaustive_search(env, space, lam, keep_table=(i == 0))
               for i, lam in enumerate(run.config.lambdas)}
    first = results[run.config.lambdas[0]]
    trace = run.path("oracle_trace.csv")
    write_trace(trace, [(key, out) for key, (_, out) in first.table.items()], model.ref_rate)
    run.wrote(trace)
    _write_csv(run.path("oracle.csv"), ORACLE_HEADER, [
        (repr(lam), mode_key(r.best_mode), repr(r.best_objective), repr(r.worst_objective))
        for lam, r in results.items()
    ])
    run.wrote(run.path("oracle.csv"))

    gaps = []
    for modes_file in sorted(run.out.glob("modes_*.csv")):
        run.inputs[modes_file.name] = _sha256(modes_file)
        for row in _read_csv(modes_file, MODES_HEADER):
            lam = float(row["lambda"])
            if lam not in results:
                continue
            res = results[lam]
            g = mode_gap(parse_mode_key(row["mode_key"]), env, res)
            gaps.append((row["label"], repr(lam), row["mode_key"], repr(g.objective), mode_key(res.best_mode),
                         repr(res.best_objective), repr(g.gap), repr(g.relative_gap)))
    _write_csv(run.path("gaps.csv"), GAPS_HEADER, gaps)
    run.wrote(run.path("gaps.csv"))


def bd_rows(anchor_rows, test_rows):
    """BD metrics for every (anchor label, test label) pair; ``None`` where undefined."""
    anchors = metrics.curves_from_rows(anchor_rows, pareto=True)
    tests = metrics.curves_from_rows(test_rows, pareto=True)
    out = []
    for a_label, a in anchors.items():
        for t_label, t in tests.items():
            try:
                out.append((a_label, t_label, metrics.bd_rate(a, t), metrics.bd_quality(a, t)))
            except SemvcError as exc:
                log.warning("bd %s vs %s: %s", a_label, t_label, exc)
                out.append((a_label, t_label, None, None))
    return out


def _fmt(v):
    return "" if v is None else repr(float(v))


@command("bd")
@click.argument("anchor_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("test_csv", type=click.Path(exists=True, dir_okay=False))
def bd(run: Run, anchor_csv: str, test_csv: str):
    """Bjontegaard deltas of TEST_CSV against ANCHOR_CSV (RD CSV files)."""
    rows = bd_rows(metrics.read_rd_csv(anchor_csv), metrics.read_rd_csv(test_csv))
    run.inputs[anchor_csv] = _sha256(Path(anchor_csv))
    run.inputs[test_csv] = _sha256(Path(test_csv))
    _write_csv(run.path("bd.csv"), metrics.BD_HEADER, [(a, t, _fmt(r), _fmt(q)) for a, t, r, q in rows])
    lines = [f"variant: {run.config.bd_variant}"]
    for a, t, r, q in rows:
        if r is None:
            lines.append(f"{t} vs {a}: undefined")
        else:
            lines.append(f"{t} vs {a}: bd_rate {r:+.4f} %  bd_quality {q:+.4f} pts")
    run.path("bd.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    run.wrote(run.path("bd.csv"))
    run.wrote(run.path("bd.txt"))
    if not logging.getLogger().isEnabledFor(logging.INFO):
        return
    click.echo("\n".join(lines[1:]))


@command("plot")
@click.argument("csvs", nargs=-1, type=click.Path(exists=True, dir_okay=False))
def plot(run: Run, csvs):
    """Static SVG of RD curves; defaults to every rd_*.csv in the run directory."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = [Path(c) for c in csvs] or sorted(run.out.glob("rd_*.csv"))
    if not paths:
        raise FileNotFoundError(f"no RD CSV files in {run.out}")
    rows = []
    for p in paths:
        run.inputs[str(p)] = _sha256(p)
        rows += metrics.read_rd_csv(p)
    curves = metrics.curves_from_rows(rows)
    with plt.rc_context({"svg.hashsalt": "semvc", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for label, curve in curves.items():
            if label.startswith("hc_"):
                ax.scatter(curve.rates, curve.fidelities, s=14, label=label)
            else:
                style = LABEL_STYLE.get(label, dict(marker="x", linestyle=":"))
                ax.plot(curve.rates, curve.fidelities, label=label, **style)
        ax.set_xlabel("rate (bits)")
        ax.set_ylabel("semantic fidelity")
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(run.path("rd.svg"), format="svg", metadata={"Date": None})
        plt.close(fig)
    run.wrote(run.path("rd.svg"))


@command("report")
def report(run: Run):
    """Markdown summary of everything present in the run directory."""
    run.path("report.md").write_text(build_report(run.out, run.config), encoding="utf-8")
    run.wrote(run.path("report.md"))


def build_report(out: Path, config: RunConfig) -> str:
    lines = ["# Run report", "", "## Settings", "",
             f"- seed: {config.seed}", f"- config hash: `{config_hash(config)}`",
             f"- lambdas: {', '.join(repr(v) for v in config.lambdas)}",
             f"- training: {config.train.iterations} iterations x {config.train.batch_size} per stage",
             f"- mode space: {config.space.size} modes", ""]

    rd_files = sorted(out.glob("rd_*.csv"))
    rows_by_file = {p.name: metrics.read_rd_csv(p) for p in rd_files}
    lines += ["## RD rows", "", "| file | label | rows |", "|---|---|---|"]
    for name, rows in rows_by_file.items():
        counts: dict = {}
        for r in rows:
            counts[r[0]] = counts.get(r[0], 0) + 1
        lines += [f"| {name} | {label} | {n} |" for label, n in counts.items()]
    lines.append("")

    if "rd_anchor.csv" in rows_by_file:
        lines += ["## BD against the fixed-QP anchor", "", "| test | BD-rate (%) | BD-quality (pts) |", "|---|---|---|"]
        for name, rows in rows_by_file.items():
            if name == "rd_anchor.csv":
                continue
            for _, t, r, q in bd_rows(rows_by_file["rd_anchor.csv"], rows):
                rs = "n/a" if r is None else f"{r:+.3f}"
                qs = "n/a" if q is None else f"{q:+.3f}"
                lines.append(f"| {t} | {rs} | {qs} |")
        lines.append("")

    if (out / "gaps.csv").exists():
        lines += ["## Oracle gaps", "", "| method | lambda | mode | relative gap |", "|---|---|---|---|"]
        for row in _read_csv(out / "gaps.csv", GAPS_HEADER):
            lines.append(f"| {row['label']} | {row['lambda']} | {row['mode_key']} | {float(row['relative_gap']):.4f} |")
        lines.append("")

    manifests = sorted(out.glob("manifest_*.json"))
    if manifests:
        lines += ["## Timings", "", "| command | wall clock (s) |", "|---|---|"]
        decision = None
        for m in manifests:
            data = json.loads(m.read_text())
            lines.append(f"| {data['verb']} | {data['wall_clock_s']:.2f} |")
            decision = data.get("decision_seconds", decision)
        lines.append("")
        if decision:
            mean_ms = 1000 * sum(decision.values()) / len(decision)
            lines += [f"Mean agent decision time per video: {mean_ms:.2f} ms", ""]
    return "\n".join(lines)


if __name__ == "__main__":  # pragma: no cover
    main()
