"""Experiment driver: quantized grid, mixed-precision stage, adaptive stage.

Results live in an append-only CSV (one row per finished job).  Each row
carries a ``job`` key (what was run) and a ``digest`` (what configuration it
produced).  Re-running a plan skips every job already in the store.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import adaptive as ad
from .data import WindowedDataset, load_csv, metrics, pareto_indices, stratified_split
from .engine import DEFAULT_THETA, compile_model, cost_report, integer_forward, load_theta
from .errors import ConfigurationError, SelectionError, SubByteError
from .kvfile import read_kv
from .model_space import ArchConfig, GridSpec, enumerate_grid, instantiate
from .modelfile import save_compiled, save_network
from .nas import NasConfig, search_once
from .quantize import SUPPORTED_BITS
from .train import TrainProtocol, train_fixed, train_slimmable

log = logging.getLogger(__name__)


@dataclass
class ExperimentPlan:
    train: WindowedDataset
    test: WindowedDataset
    grids: list  # GridSpec per bit-width
    protocol: TrainProtocol = field(default_factory=TrainProtocol)
    nas: NasConfig = field(default_factory=NasConfig)
    out_dir: Path = Path("results")
    jobs: int = 1
    seed: int = 0
    validation: WindowedDataset | None = None  # adaptive threshold/width choice; None: training holdout
    theta: dict = field(default_factory=lambda: dict(DEFAULT_THETA))
    max_drop: float = 5.0  # backbone eligibility, balanced-accuracy points

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.jobs < 1:
            raise ConfigurationError("parallelism must be at least 1")
        for g in self.grids:
            if g.bits not in SUPPORTED_BITS:
                raise ConfigurationError(f"grid bit-width {g.bits} unsupported")

    def config_digest(self, arch: ArchConfig) -> str:
        h = hashlib.sha256()
        for part in (arch.to_text(), self.protocol.key(), str(self.seed), self.train.digest):
            h.update(part.encode())
            h.update(b"\0")
        return h.hexdigest()

    @property
    def store_path(self) -> Path:
        return self.out_dir / "results.csv"

    def validation_set(self) -> WindowedDataset:
        if self.validation is not None:
            return self.validation
        _, hold = stratified_split(self.train.y, self.protocol.holdout_fraction,
                                   np.random.default_rng(self.protocol.seed))
        return self.train.subset(hold)


def load_plan(path) -> ExperimentPlan:
    """Plan file in ``key = value`` form.

    Keys: ``train``, ``test``, ``validation`` (CSV paths, relative to the plan
    file), ``template``, ``channels``, ``kernels``, ``pools``, ``bits`` (lists),
    ``epochs``, ``lr``, ``batch_size``, ``weight_decay``, ``seed``, ``jobs``,
    ``lambdas``, ``out``, ``theta`` (path to a throughput table), ``max_drop``.
    """
    path = Path(path)
    kv = read_kv(path)
    base = path.parent

    def ints(key, default):
        return tuple(int(v) for v in kv[key].split(",")) if key in kv else default

    try:
        train = load_csv(base / kv["train"])
        test = load_csv(base / kv["test"])
    except KeyError as exc:
        raise ConfigurationError(f"plan file lacks {exc.args[0]!r}") from None
    validation = load_csv(base / kv["validation"]) if "validation" in kv else None
    template = kv.get("template", "B")
    default = GridSpec.template_a() if template == "A" else GridSpec.template_b()
    grids = [GridSpec(template, ints("channels", default.channel_choices), ints("kernels", default.kernel_choices),
                      ints("pools", default.pool_choices), b, train.n_classes, train.channels, train.length)
             for b in ints("bits", SUPPORTED_BITS)]
    seed = int(kv.get("seed", 0))
    protocol = TrainProtocol(initial_lr=float(kv.get("lr", 0.01)), batch_size=int(kv.get("batch_size", 32)),
                             weight_decay=float(kv.get("weight_decay", 0.0)), max_epochs=int(kv.get("epochs", 100)),
                             seed=seed)
    nas = NasConfig([float(v) for v in kv["lambdas"].split(",")]) if "lambdas" in kv else NasConfig()
    theta = load_theta(base / kv["theta"]) if "theta" in kv else dict(DEFAULT_THETA)
    return ExperimentPlan(train, test, grids, protocol, nas, base / kv.get("out", "results"),
                          int(kv.get("jobs", 1)), seed, validation, theta, float(kv.get("max_drop", 5.0)))


# -- results store ------------------------------------------------------------------

@dataclass
class ResultRow:
    job: str
    digest: str
    stage: str  # grid | mixed
    status: str  # ok | failed
    template: str = ""
    channels: str = ""
    kernel: int = 0
    pools: str = ""
    w_bits: str = ""
    a_bits: str = ""
    accuracy: float = float("nan")
    balanced_accuracy: float = float("nan")
    macro_f1: float = float("nan")
    memory_bytes: int = 0
    macs: int = 0
    cycle_units: float = float("nan")
    parent: str = ""
    lam: float = float("nan")
    artifact: str = ""
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def arch(self, n_classes: int, in_channels: int, length: int) -> ArchConfig:
        split = lambda s: tuple(int(v) for v in s.split("/"))  # noqa: E731
        return ArchConfig(self.template, split(self.channels), self.kernel, split(self.pools), split(self.w_bits),
                          split(self.a_bits), n_classes, in_channels, length)

    @property
    def all_one_bit(self) -> bool:
        return set(self.w_bits.split("/")) == {"1"} and set(self.a_bits.split("/")) == {"1"}


COLUMNS = [f.name for f in fields(ResultRow)]
_TYPES = {f.name: f.type for f in fields(ResultRow)}


def _arch_columns(arch: ArchConfig) -> dict:
    j = lambda t: "/".join(map(str, t))  # noqa: E731
    return dict(template=arch.template, channels=j(arch.channels), kernel=arch.kernel, pools=j(arch.pools),
                w_bits=j(arch.w_bits), a_bits=j(arch.a_bits))


class ResultsStore:
    """Append-only CSV of :class:`ResultRow`; writes hold an exclusive file lock."""

    def __init__(self, path):
        self.path = Path(path)

    def rows(self) -> list:
        if not self.path.exists():
            return []
        with self.path.open(newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != COLUMNS:
                raise ConfigurationError(f"{self.path}: unexpected results columns {reader.fieldnames}")
            out = []
            for rec in reader:
                kw = {}
                for k, v in rec.items():
                    t = _TYPES[k]
                    kw[k] = int(v) if t in ("int", int) else float(v) if t in ("float", float) else v
                out.append(ResultRow(**kw))
        return out

    def jobs(self) -> set:
        return {r.job for r in self.rows()}

    def append(self, row: ResultRow) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", newline="") as f:
            fcntl.flock(f, fcntl.LOCK_EX)
            try:
                w = csv.writer(f)
                if f.tell() == 0:
                    w.writerow(COLUMNS)
                w.writerow([_fmt(getattr(row, c)) for c in COLUMNS])
            finally:
                fcntl.flock(f, fcntl.LOCK_UN)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


# -- jobs -------------------------------------------------------------------------

def evaluate_compiled(cm, data: WindowedDataset, width: float = 1.0):
    pred = integer_forward(cm, cm.quantize_input(data.x), width).argmax(axis=1)
    return metrics(pred, data.y, data.n_classes)


def _finish(plan: ExperimentPlan, model, job: str, stage: str, **extra) -> ResultRow:
    """Compile, score on the test split, write artifacts, build the row."""
    digest = plan.config_digest(model.arch)
    cm = compile_model(model, theta=plan.theta)
    m = evaluate_compiled(cm, plan.test)
    cost = cost_report(cm)
    art = plan.out_dir / "models" / digest[:16]
    art.parent.mkdir(parents=True, exist_ok=True)
    save_network(model, art.with_suffix(".npz"))
    save_compiled(cm, art.with_suffix(".sbh"))
    return ResultRow(job, digest, stage, "ok", **_arch_columns(model.arch), accuracy=m.accuracy,
                     balanced_accuracy=m.balanced_accuracy, macro_f1=m.macro_f1, memory_bytes=cost.memory_bytes,
                     macs=cost.macs, cycle_units=cost.cycle_units, artifact=str(art.with_suffix(".sbh")), **extra)


def _failed(job, digest, stage, arch, exc, **extra) -> ResultRow:
    log.warning("job %s failed: %s", job, exc)
    log.debug("%s", traceback.format_exc())
    return ResultRow(job, digest, stage, "failed", **_arch_columns(arch),
                     error=f"{type(exc).__name__}: {exc}".replace("\n", " "), **extra)


def _grid_job(plan: ExperimentPlan, arch: ArchConfig) -> ResultRow:
    digest = plan.config_digest(arch)
    try:
        model = train_fixed(instantiate(arch, plan.seed), plan.train, plan.protocol)
        return _finish(plan, model, digest, "grid")
    except (SubByteError, FloatingPointError) as exc:
        return _failed(digest, digest, "grid", arch, exc)


def _mixed_job(plan: ExperimentPlan, parent: ResultRow, lam: float) -> ResultRow:
    base = parent.arch(plan.train.n_classes, plan.train.channels, plan.train.length)
    job = f"mixed:{parent.digest[:16]}:{lam!r}"
    try:
        res = search_once(base, plan.train, plan.protocol, lam, plan.nas, plan.seed)
        return _finish(plan, res.model, job, "mixed", parent=parent.digest, lam=lam)
    except (SubByteError, FloatingPointError) as exc:
        return _failed(job, plan.config_digest(base), "mixed", base, exc, parent=parent.digest, lam=lam)


def _run_jobs(plan: ExperimentPlan, fn, arglist) -> list:
    store = ResultsStore(plan.store_path)
    out = []
    if plan.jobs == 1 or len(arglist) <= 1:
        for args in arglist:
            row = fn(plan, *args)
            store.append(row)
            out.append(row)
        return out
    with ProcessPoolExecutor(plan.jobs) as pool:
        futures = [pool.submit(fn, plan, *args) for args in arglist]
        for fut in futures:
            row = fut.result()
            store.append(row)
            out.append(row)
    return out


def run_grid(plan: ExperimentPlan) -> list:
    """Train, compile and score every configuration of every bit-width grid.

    Returns all grid rows of the store (old and new) in grid order."""
    store = ResultsStore(plan.store_path)
    done = store.jobs()
    archs = [a for g in plan.grids for a in enumerate_grid(g)]
    todo = [(a,) for a in archs if plan.config_digest(a) not in done]
    log.info("grid: %d configurations, %d to run", len(archs), len(todo))
    _run_jobs(plan, _grid_job, todo)
    by_job = {r.job: r for r in store.rows()}
    return [by_job[plan.config_digest(a)] for a in archs]


def memory_front(rows) -> list:
    ok = [r for r in rows if r.ok]
    if not ok:
        return []
    idx = pareto_indices([r.balanced_accuracy for r in ok], [r.memory_bytes for r in ok], [r.digest for r in ok])
    return [ok[i] for i in idx]


def cycle_front(rows) -> list:
    ok = [r for r in rows if r.ok]
    if not ok:
        return []
    idx = pareto_indices([r.balanced_accuracy for r in ok], [r.cycle_units for r in ok], [r.digest for r in ok])
    return [ok[i] for i in idx]


def run_mixed(plan: ExperimentPlan, grid_rows) -> list:
    """Precision search from each memory-Pareto-optimal 8-bit grid model.

    Rows whose extracted configuration repeats an earlier digest are dropped
    from the returned list (they stay in the store for resumability)."""
    eight = [r for r in grid_rows if r.ok and r.stage == "grid"
             and set(r.w_bits.split("/")) == {"8"} and set(r.a_bits.split("/")) == {"8"}]
    parents = memory_front(eight)
    store = ResultsStore(plan.store_path)
    done = store.jobs()
    todo = [(p, lam) for p in parents for lam in plan.nas.lambda_sweep
            if f"mixed:{p.digest[:16]}:{lam!r}" not in done]
    log.info("mixed: %d parents, %d searches to run", len(parents), len(todo))
    _run_jobs(plan, _mixed_job, todo)
    wanted = {f"mixed:{p.digest[:16]}:{lam!r}" for p in parents for lam in plan.nas.lambda_sweep}
    rows, seen = [], set()
    for r in store.rows():
        if r.job in wanted and r.digest not in seen:
            seen.add(r.digest)
            rows.append(r)
    return rows


@dataclass
class AdaptiveResult:
    model: ad.AdaptiveModel
    backbone_row: ResultRow
    sweep: list  # on the test split
    static_score: float
    static_cost: float
    chosen: ad.SweepPoint  # test-split point at the chosen threshold
    width_sweeps: dict
    adaptive_file_bytes: int
    static_file_bytes: int


def build_adaptive(rows, plan: ExperimentPlan, echo=None) -> AdaptiveResult:
    """Cycle-front backbone by gain, slimmable retraining, width and threshold
    choice on validation data, then a test-split sweep and model files."""
    front = cycle_front(rows)
    if len(front) < 2:
        raise SelectionError(f"cycle Pareto front has {len(front)} model(s); need at least two")
    pick = front[ad.select_backbone([(100 * r.balanced_accuracy, r.cycle_units) for r in front], plan.max_drop)]
    if pick.all_one_bit:
        raise ConfigurationError(
            f"selected backbone {pick.digest[:16]} is all-1-bit; adaptive inference over binary backbones is refused")
    arch = pick.arch(plan.train.n_classes, plan.train.channels, plan.train.length)
    model = train_slimmable(instantiate(arch, plan.seed), plan.train, plan.protocol, echo=echo)
    val = plan.validation_set()
    w_small, width_sweeps = ad.choose_width(model, val, theta=plan.theta)
    am = ad.build_adaptive(model, w_small, theta=plan.theta)
    val_sweep = width_sweeps[w_small]
    am.threshold = ad.pick_threshold(val_sweep, val_sweep[-1].score).threshold
    paths = ad.run_paths(am, plan.test)
    sweep = ad.threshold_sweep(am, plan.test, paths=paths)
    chosen = ad.threshold_sweep(am, plan.test, [am.threshold], paths=paths)[0]
    static = compile_model(model, (1.0,), plan.theta)
    static_score = evaluate_compiled(static, plan.test).balanced_accuracy
    out = plan.out_dir / "adaptive"
    out.mkdir(parents=True, exist_ok=True)
    save_network(model, out / "backbone.npz")
    a_bytes = save_compiled(am.backbone, out / "adaptive.sbh", am.adaptive_triple())
    s_bytes = save_compiled(static, out / "static.sbh")
    ad.write_sweep(sweep, out / "sweep.csv")
    for w, s in width_sweeps.items():
        ad.write_sweep(s, out / f"validation_sweep_w{w}.csv")
    return AdaptiveResult(am, pick, sweep, static_score, cost_report(static).cycle_units, chosen, width_sweeps,
                          a_bytes, s_bytes)


def front_csv(rows) -> str:
    cols = ["digest", "stage", "template", "channels", "kernel", "pools", "w_bits", "a_bits",
            "balanced_accuracy", "macro_f1", "memory_bytes", "cycle_units"]
    lines = [",".join(cols)]
    for r in rows:
        d = asdict(r)
        lines.append(",".join(_fmt(d[c]) if isinstance(d[c], float) else str(d[c]) for c in cols))
    return "\n".join(lines) + "\n"


def with_protocol(plan: ExperimentPlan, **kw) -> ExperimentPlan:
    return replace(plan, protocol=replace(plan.protocol, **kw))
