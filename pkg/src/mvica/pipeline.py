"""Experiment configs, run manifests and the generate -> train -> evaluate
(-> aggregate) pipeline.

A config is an INI file.  ``[experiment]`` holds the run name, output
directory and the master seed; ``[data]``, ``[train]``, ``[eval]`` and
``[aggregate]`` hold stage parameters.  Stage seeds not given explicitly are
split off the master seed by stage index, so stages draw independent streams
and a whole run is reproducible from one number.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import aggregate, contrastive, evalkit, synthgen, tables

STAGES = ("generate", "train", "evaluate", "aggregate")

EXPERIMENT_KEYS = ("name", "output_dir", "seed")
TRAIN_KEYS = ("form", "h_widths", "psi_widths", "lr", "batch", "steps", "seed", "holdout",
              "extractor", "activation", "embed_widths", "lr_decay")
EVAL_KEYS = ("n_perm", "max_rows", "target")
AGGREGATE_KEYS = ("n_views", "gauge_knots", "perm_tests", "K", "n_starts")
SECTION_KEYS = {
    "experiment": EXPERIMENT_KEYS,
    "data": synthgen.DATA_KEYS,
    "train": TRAIN_KEYS,
    "eval": EVAL_KEYS,
    "aggregate": AGGREGATE_KEYS,
}
TARGETS = ("corruptions", "sources")


def tool_version() -> str:
    from . import __version__

    return __version__


def stage_seed(master: int, stage: str) -> int:
    """Counter-based split of the master seed: one 32-bit seed per stage."""
    ss = np.random.SeedSequence(int(master), spawn_key=(STAGES.index(stage),))
    return int(ss.generate_state(1)[0])


def _ints(text, key):
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ValueError(f"{key}: expected comma-separated integers, got {text!r}") from None


def _number(section, name, key, cast, default=None):
    raw = section.get(key)
    if raw is None:
        if default is None:
            raise ValueError(f"missing key [{name}].{key}")
        return default
    try:
        return cast(raw)
    except ValueError:
        raise ValueError(f"[{name}].{key}: cannot parse {raw!r}") from None


@dataclass
class ExperimentConfig:
    name: str
    output_dir: str
    seed: int
    sections: dict
    source: str = ""

    # -- parsing ----------------------------------------------------------

    @classmethod
    def from_text(cls, text, base_dir="."):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case (``K``)
        parser.read_string(text)
        sections = {}
        for name in parser.sections():
            if name not in SECTION_KEYS:
                raise ValueError(f"unknown section [{name}]")
            for key in parser[name]:
                if key not in SECTION_KEYS[name]:
                    raise ValueError(f"unknown key [{name}].{key}")
            sections[name] = {k: v.strip() for k, v in parser[name].items()}
        exp = sections.get("experiment")
        if exp is None:
            raise ValueError("missing section [experiment]")
        if "seed" not in exp:
            raise ValueError("missing key [experiment].seed")
        seed = _number(exp, "experiment", "seed", int)
        if "data" not in sections:
            raise ValueError("missing section [data]")
        out = exp.get("output_dir", "runs/" + exp.get("name", "experiment"))
        if not os.path.isabs(out):
            out = os.path.normpath(os.path.join(base_dir, out))
        cfg = cls(exp.get("name", "experiment"), out, seed, sections, text)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        if not os.path.isfile(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as fh:
            return cls.from_text(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))

    def validate(self):
        """Parse every stage section once so bad values fail before any work."""
        self.data_spec()
        if "train" in self.sections:
            self.model_kwargs()
            self.train_config()
        self.eval_options()
        if "aggregate" in self.sections:
            self.aggregate_options()

    # -- canonical form ---------------------------------------------------

    def canonical_text(self) -> str:
        """Sorted sections and keys with stripped values and ``\\n`` line ends."""
        lines = []
        for name in sorted(self.sections):
            lines.append(f"[{name}]")
            lines.extend(f"{k}={self.sections[name][k]}" for k in sorted(self.sections[name]))
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    # -- stage parameters -------------------------------------------------

    def seeds(self) -> dict:
        out = {s: stage_seed(self.seed, s) for s in STAGES}
        if "seed" in self.sections["data"]:
            out["generate"] = int(self.sections["data"]["seed"])
        if "seed" in self.sections.get("train", {}):
            out["train"] = int(self.sections["train"]["seed"])
        return out

    def n_samples(self) -> int:
        return _number(self.sections["data"], "data", "n_samples", int, 10_000)

    def data_spec(self) -> synthgen.GenerativeSpec:
        sec = {k: v for k, v in self.sections["data"].items() if k != "n_samples"}
        sec.setdefault("seed", str(stage_seed(self.seed, "generate")))
        return synthgen.spec_from_config(sec)

    def model_kwargs(self) -> dict:
        sec = self.sections.get("train", {})
        form = sec.get("form", "FORM_C")
        if form not in contrastive.FORMS:
            raise ValueError(f"[train].form: unknown form {form!r}")
        extractor = sec.get("extractor", "mlp")
        if extractor not in contrastive.EXTRACTORS:
            raise ValueError(f"[train].extractor: unknown extractor {extractor!r}")
        return dict(
            form=form,
            h_widths=_ints(sec.get("h_widths", "128,128"), "[train].h_widths"),
            psi_widths=_ints(sec.get("psi_widths", "64,64"), "[train].psi_widths"),
            activation=sec.get("activation", "smooth-sigmoid-like"),
            extractor=extractor,
            embed_widths=_ints(sec.get("embed_widths", ""), "[train].embed_widths"),
        )

    def train_config(self) -> contrastive.TrainConfig:
        sec = self.sections.get("train", {})
        d = contrastive.TrainConfig()
        cfg = contrastive.TrainConfig(
            lr=_number(sec, "train", "lr", float, d.lr),
            batch=_number(sec, "train", "batch", int, d.batch),
            steps=_number(sec, "train", "steps", int, d.steps),
            seed=self.seeds()["train"],
            holdout=_number(sec, "train", "holdout", float, d.holdout),
            lr_decay=sec.get("lr_decay", d.lr_decay).strip(),
        )
        if cfg.steps < 1 or cfg.batch < 1 or not cfg.lr > 0:
            raise ValueError("[train]: steps, batch and lr must be positive")
        if not 0 < cfg.holdout < 1:
            raise ValueError("[train].holdout must be in (0, 1)")
        return cfg

    def eval_options(self) -> dict:
        sec = self.sections.get("eval", {})
        target = sec.get("target", "corruptions")
        if target not in TARGETS:
            raise ValueError(f"[eval].target: choose from {TARGETS}")
        opts = dict(n_perm=_number(sec, "eval", "n_perm", int, 200),
                    max_rows=_number(sec, "eval", "max_rows", int, 1000), target=target)
        if opts["n_perm"] < evalkit.MIN_PERMUTATIONS:
            raise ValueError(f"[eval].n_perm must be at least {evalkit.MIN_PERMUTATIONS}")
        return opts

    def aggregate_options(self) -> dict | None:
        sec = self.sections.get("aggregate")
        if sec is None:
            return None
        k_raw = sec.get("K")
        opts = dict(
            n_views=_number(sec, "aggregate", "n_views", int, 2),
            gauge_knots=_number(sec, "aggregate", "gauge_knots", int, aggregate.DEFAULT_KNOTS),
            perm_tests=_number(sec, "aggregate", "perm_tests", int, 200),
            K=None if k_raw is None else _number(sec, "aggregate", "K", float),
            n_starts=_number(sec, "aggregate", "n_starts", int, 4),
        )
        if opts["n_views"] < 2:
            raise ValueError("[aggregate].n_views must be at least 2")
        return opts


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    config_hash: str
    version: str
    seeds: dict
    status: str = "running"
    timings: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    failure: str | None = None
    platform: str = field(default_factory=platform.platform)

    def record(self, path):
        with open(path, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        self.outputs[os.path.basename(path)] = digest

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    def write(self, directory):
        path = os.path.join(directory, "manifest.json")
        with open(path, "w") as fh:
            fh.write(self.to_json())
        return path

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


# ---------------------------------------------------------------------------
# stages


def stage_generate(cfg: ExperimentConfig, out_dir):
    spec = cfg.data_spec()
    ds = synthgen.sample_dataset(spec, cfg.n_samples())
    data_dir = os.path.join(out_dir, "data")
    os.makedirs(data_dir, exist_ok=True)
    paths = synthgen.write_dataset(ds, data_dir)
    return ds, paths


def load_data(cfg: ExperimentConfig, data_dir):
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    return synthgen.read_dataset(data_dir, cfg.data_spec())


def stage_train(cfg: ExperimentConfig, ds, out_dir):
    model = contrastive.RegressionModel(dim=ds.dim, seed=cfg.seeds()["train"], **cfg.model_kwargs())
    res = contrastive.train(model, ds, cfg.train_config())
    seed = cfg.seeds()["train"]
    paths = [
        tables.write_table(os.path.join(out_dir, "loss.csv"), ("step", "loss", "acc"), res.trace_rows(), seed),
        tables.write_table(os.path.join(out_dir, "split.csv"), ("row", "heldout"),
                           sorted([(int(r), False) for r in res.train_rows] + [(int(r), True) for r in res.test_rows]),
                           seed),
    ]
    snap = os.path.join(out_dir, "model.params")
    model.save(snap)
    paths.append(snap)
    return res, paths


def _heldout_rows(out_dir):
    _, header, rows = tables.read_table(os.path.join(out_dir, "split.csv"))
    return np.array([int(r[0]) for r in rows if r[1] == "true"], dtype=int)


def _feature_views(model):
    return [v for v, side in ((1, "h1"), (2, "h2")) if side in model.extractors]


def stage_evaluate(cfg: ExperimentConfig, ds, model, test_rows, out_dir):
    """MCC of each extractor against its view's target, and cross-view alignment.

    ``alignment.csv`` lists the dCor between every pair of components: for
    FORM_C between ``h1`` and ``h2`` (after matching ``h2`` to ``h1``), for
    one-sided forms between the features and the target.
    """
    opts = cfg.eval_options()
    seed = stage_seed(cfg.seed, "evaluate")
    rows = test_rows
    if rows.size > opts["max_rows"]:
        rows = np.sort(np.random.default_rng(seed).choice(rows, opts["max_rows"], replace=False))
    paths, summary, feats = [], {}, {}
    for v in _feature_views(model):
        x = ds.views[v - 1][test_rows]
        target = ds.corruptions[v - 1] if opts["target"] == "corruptions" else ds.sources
        feats[v] = model.features(ds.views[v - 1], v)
        rep = evalkit.mcc(model.features(x, v), target[test_rows])
        name = "mcc.csv" if not paths else f"mcc_view{v}.csv"
        paths.append(evalkit.write_mcc_report(os.path.join(out_dir, name), rep, seed))
        summary[f"mean_mcc_view{v}"] = rep.mean
    views = sorted(feats)
    if len(views) == 2:
        ref, cand = feats[1][rows], feats[2][rows]
        perm = evalkit.match_components(np.abs(evalkit.spearman_matrix(ref, cand)))
        cand = cand[:, perm]
        labels = ("h1", "h2")
    else:
        v = views[0]
        target = ds.corruptions[v - 1] if opts["target"] == "corruptions" else ds.sources
        ref, cand = feats[v][rows], target[rows]
        perm = evalkit.match_components(np.abs(evalkit.spearman_matrix(ref, cand)))
        cand = cand[:, perm]
        labels = (f"h{v}", opts["target"])
    D = ref.shape[1]
    stat, pval = evalkit.dcor_battery([ref[:, [i]] for i in range(D)] + [cand[:, [j]] for j in range(D)],
                                      n_perm=opts["n_perm"], seed=seed)
    align_rows = []
    for i in range(D):
        for j in range(D):
            align_rows.append((i, int(perm[j]), stat[i, D + j], pval[i, D + j], i == j))
    paths.append(tables.write_table(os.path.join(out_dir, "alignment.csv"),
                                    (f"{labels[0]}_component", f"{labels[1]}_component", "dcor", "p_value",
                                     "matched"), align_rows, seed))
    off = [r[2] for r in align_rows if not r[4]]
    on = [r[2] for r in align_rows if r[4]]
    summary.update(max_offdiag_dcor=float(max(off)) if off else 0.0, min_matched_dcor=float(min(on)),
                   eval_rows=int(rows.size))
    return summary, paths, feats


def aggregate_features(features, opts, truth=None, gauges="search", seed=0):
    """Align every view to the first, pick gauges and run the condition battery.

    ``gauges`` is ``"search"`` (condition-penalized search) or ``"identity"``.
    Returns ``(AggregationResult, objective or None)``.
    """
    if len(features) != opts["n_views"]:
        raise ValueError(f"[aggregate].n_views={opts['n_views']} but {len(features)} feature sets were given")
    ref = np.asarray(features[0], dtype=float)
    views = [ref] + [aggregate.align_views(ref, f).apply(f) for f in features[1:]]
    objective = None
    if gauges == "search":
        search = aggregate.search_gauges(views, n_knots=opts["gauge_knots"], n_starts=opts["n_starts"], seed=seed)
        chosen, objective = search.gauges, search.objective.tolist()
    elif gauges == "identity":
        chosen = [aggregate.GaugeFunction.identity()] * len(views)
    else:
        raise ValueError(f"unknown gauge mode {gauges!r}")
    res = aggregate.aggregate_views(views, chosen, truth=truth, K=opts["K"], n_perm=opts["perm_tests"], seed=seed)
    return res, objective


def write_aggregation(res, out_dir, seed):
    paths = [
        tables.write_table(os.path.join(out_dir, "conditions.csv"), ("condition", "verdict", "p_value"),
                           res.condition_rows(), seed),
        tables.write_matrix(os.path.join(out_dir, "omega.csv"), res.omega, seed),
    ]
    if res.alpha is not None:
        rows = [(d, a, b, r2) for d, (a, b, r2) in enumerate(zip(res.alpha, res.beta, res.fit_r2))]
        paths.append(tables.write_table(os.path.join(out_dir, "affine_fit.csv"),
                                        ("component", "alpha", "beta", "r2"), rows, seed))
    return paths


def stage_aggregate(cfg: ExperimentConfig, ds, feats, test_rows, out_dir):
    opts = cfg.aggregate_options()
    seed = stage_seed(cfg.seed, "aggregate")
    views = [feats[v][test_rows] for v in sorted(feats)]
    res, objective = aggregate_features(views, opts, truth=ds.sources[test_rows], seed=seed)
    paths = write_aggregation(res, out_dir, seed)
    passed = all(v["verdict"] is not False for v in res.conditions.values())
    return {"conditions_pass": bool(passed), "gauge_objective": objective}, paths


# ---------------------------------------------------------------------------
# driver


def check_outputs(paths):
    """Every CSV must carry a seed line and a header and parse back."""
    for p in paths:
        if not os.path.isfile(p):
            raise RuntimeError(f"declared output missing: {p}")
        if p.endswith(".csv"):
            seed, header, _ = tables.read_table(p)
            if seed is None or not header:
                raise RuntimeError(f"{p}: missing seed line or header")


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage} failed: {type(exc).__name__}: {exc}")
        self.stage = stage


def run_experiment(config_path, output_dir=None) -> RunManifest:
    """Run every configured stage, writing reports and ``manifest.json``.

    The manifest is written with status ``running`` before the first stage
    and rewritten after the last one (``ok``) or after a failure, in which
    case :class:`StageError` is raised.
    """
    cfg = ExperimentConfig.load(config_path) if isinstance(config_path, (str, os.PathLike)) else config_path
    out = output_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    man = RunManifest(cfg.config_hash(), tool_version(), cfg.seeds())
    with open(os.path.join(out, "config.cfg"), "w") as fh:
        fh.write(cfg.canonical_text())
    man.write(out)
    summary = {"name": cfg.name}
    stage = "generate"
    try:
        t = time.perf_counter()
        ds, paths = stage_generate(cfg, out)
        man.timings[stage] = time.perf_counter() - t
        stage = "train"
        t = time.perf_counter()
        res, more = stage_train(cfg, ds, out)
        paths += more
        man.timings[stage] = time.perf_counter() - t
        summary.update(final_loss=res.final_loss, heldout_loss=res.heldout_loss, warnings=res.warnings)
        stage = "evaluate"
        t = time.perf_counter()
        ev, more, feats = stage_evaluate(cfg, ds, res.model, res.test_rows, out)
        paths += more
        summary.update(ev)
        man.timings[stage] = time.perf_counter() - t
        if cfg.aggregate_options() is not None:
            stage = "aggregate"
            t = time.perf_counter()
            ag, more = stage_aggregate(cfg, ds, feats, res.test_rows, out)
            paths += more
            summary.update(ag)
            man.timings[stage] = time.perf_counter() - t
        spath = os.path.join(out, "summary.json")
        with open(spath, "w") as fh:
            fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        paths.append(spath)
        stage = "check"
        check_outputs(paths)
        for p in paths:
            man.record(p)
        man.status = "ok"
    except Exception as exc:
        man.status = "failed"
        man.failure = f"{stage}: {type(exc).__name__}: {exc}"
        man.write(out)
        raise StageError(stage, exc) from exc
    man.write(out)
    return man
