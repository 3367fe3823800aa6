"""Command-line front end: ``generate -> train -> evaluate -> report``.

Every command reads one JSON run configuration (defaults below, printed by
``--dump-config``), adjusted with ``--config PATH`` and dotted
``--set KEY=VALUE`` overrides. Run directory layout (``--out``)::

    cohort/                  generated cohort (unless cohort.path is set)
    model/, split.json       trained model and its split (rep00/, rep01/, ...
                             instead when --repeats > 1)
    metrics.csv              run_id, method, group, M, auc, auc_std
    scores.csv               subject_id, label, summary, probability (NP)
    scores_baseline.csv      same for the linear baseline
    gevd.json                fitted GEVD parameters per method
    npm/                     test NPMs and per-group difference maps (NPNT)
    regions.csv              region association (when masks are configured)

Exit codes: 0 success, 1 internal error, 2 bad input or path, 3 invalid
configuration, 4 numeric failure (non-finite loss, GEVD non-convergence).
"""
import argparse
import copy
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .cohort import DESK_PROTOCOL, CohortSpec, SplitProtocol, generate, load_cohort, save_cohort, split
from .mixed_effect import baseline_blr_normative, with_intercept
from .neural_process import NeuralProcessNormativeModel
from .neural_process.model import NpModel, TrainingError
from .normative import (abnormality_probabilities, auc, compute_npm, first_principal_component,
                        group_difference_maps, region_association, summary_statistics)
from .tensorcore import Rng, TensorFormatError, save_tensor

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4

# cohorts beyond this many stored values (subjects x voxels) trigger a warning
SIZE_WARNING_VALUES = 5_000_000

NOVELTY_MODES = ("absolute", "signed")
NOVELTY_BLOCKS = ("mean", "max")
GEVD_POPULATIONS = ("train", "train_healthy")
METRICS_COLUMNS = ["run_id", "method", "group", "M", "auc", "auc_std"]
SCORES_COLUMNS = ["subject_id", "label", "summary", "probability"]
CONTROL_GROUP = "healthy_control"


class CliError(Exception):
    code = EXIT_INTERNAL


class InputError(CliError):
    code = EXIT_INPUT


class ConfigError(CliError):
    code = EXIT_CONFIG


class NumericError(CliError):
    code = EXIT_NUMERIC


def _cohort_defaults():
    d = CohortSpec().to_dict()
    d.pop("seed")
    return {"path": None, **d}


DEFAULT_CONFIG = {
    "cohort": _cohort_defaults(),
    "split": {"train_counts": dict(DESK_PROTOCOL)},
    "context": {"M": 20},
    "architecture": {
        "conv_channels": [8, 16, 32], "kernel_size": 3, "pool_size": 2, "feature_width": 32,
        "joint_widths": [32, 32], "latent_dim": 16, "decoder_widths": [32], "decoder_channels": [16, 8],
        "dropout": 0.1,
    },
    "schedule": {"epochs": 100, "lr_start": 1e-2, "lr_end": 1e-5, "batch_size": 8, "n_mc": 1},
    "quantile": {"eps": 1e-3},
    "prediction": {"K": 10, "L": 10, "mc_dropout": True},
    "novelty": {"top_fraction": 0.01, "mode": "absolute", "block": "mean", "gevd_population": "train"},
    "analysis": {"region_masks": None, "alpha": 0.01},
    "seed": 0,
    "out": "run",
}

# dictionaries whose keys are data (labels), not schema
_FREE_DICTS = {("split", "train_counts")}
# values that may be null or a string
_OPTIONAL_STR = {("cohort", "path"), ("analysis", "region_masks")}


def default_config():
    return copy.deepcopy(DEFAULT_CONFIG)


# ---------------------------------------------------------------- config

def _type_ok(default, value):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _merge(default, given, path=()):
    """Overlay ``given`` on ``default``, rejecting unknown keys and wrong types."""
    dotted = ".".join(path) or "<root>"
    if not isinstance(given, dict):
        raise ConfigError(f"{dotted}: expected an object, got {type(given).__name__}")
    if path in _FREE_DICTS:
        out = {}
        for k, v in given.items():
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{dotted}.{k}: expected an integer, got {v!r}")
            out[str(k)] = v
        return out
    out = copy.deepcopy(default)
    for key, value in given.items():
        sub = path + (key,)
        name = ".".join(sub)
        if key not in default:
            raise ConfigError(f"unknown config key '{name}'")
        ref = default[key]
        if sub in _OPTIONAL_STR:
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{name}: expected a path string or null, got {value!r}")
            out[key] = value
        elif isinstance(ref, dict):
            out[key] = _merge(ref, value, sub)
        elif sub == ("cohort", "deviations"):
            out[key] = _merge_deviations(value, name)
        elif not _type_ok(ref, value):
            raise ConfigError(f"{name}: expected {type(ref).__name__}, got {value!r}")
        else:
            out[key] = float(value) if isinstance(ref, float) else value
    return out


def _merge_deviations(value, name):
    if not isinstance(value, list):
        raise ConfigError(f"{name}: expected a list of deviation objects")
    ref = _cohort_defaults()["deviations"][0]
    return [_merge(ref, dev, ("cohort", "deviations", str(i))) for i, dev in enumerate(value)]


def parse_override(text):
    """``KEY=VALUE`` with a dotted key; VALUE is JSON, else a bare string."""
    if "=" not in text:
        raise ConfigError(f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(config, key, value):
    parts = key.split(".")
    node = config
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key '{'.'.join(parts[:i + 1])}'")
        node = node[part]
    if not isinstance(node, dict):
        raise ConfigError(f"cannot set '{key}': parent is not an object")
    if parts[-1] not in node and tuple(parts[:-1]) not in _FREE_DICTS:
        raise ConfigError(f"unknown config key '{key}'")
    node[parts[-1]] = value


def validate_config(config):
    """Semantic checks on a merged config. Returns a list of warnings."""
    warnings_out = []
    spec = cohort_spec(config, seed=config["seed"])
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"cohort: {exc}") from None
    if config["seed"] < 0 or config["seed"] >= 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if config["context"]["M"] < 1:
        raise ConfigError("context.M must be >= 1")
    sched = config["schedule"]
    if sched["epochs"] < 1 or sched["batch_size"] < 1 or sched["n_mc"] < 1:
        raise ConfigError("schedule.epochs, batch_size and n_mc must be >= 1")
    if not (sched["lr_start"] > 0 and sched["lr_end"] > 0):
        raise ConfigError("schedule learning rates must be > 0")
    pred = config["prediction"]
    if pred["K"] < 1 or pred["L"] < 1:
        raise ConfigError("prediction.K and prediction.L must be >= 1")
    nov = config["novelty"]
    if not 0 < nov["top_fraction"] <= 1:
        raise ConfigError("novelty.top_fraction must be in (0, 1]")
    for key, allowed in (("mode", NOVELTY_MODES), ("block", NOVELTY_BLOCKS), ("gevd_population", GEVD_POPULATIONS)):
        if nov[key] not in allowed:
            raise ConfigError(f"novelty.{key} must be one of {allowed}, got {nov[key]!r}")
    if not 0 < config["quantile"]["eps"] < 0.5:
        raise ConfigError("quantile.eps must be in (0, 0.5)")
    if not 0 < config["analysis"]["alpha"] < 1:
        raise ConfigError("analysis.alpha must be in (0, 1)")
    if not 0 <= config["architecture"]["dropout"] < 1:
        raise ConfigError("architecture.dropout must be in [0, 1)")
    if any(v < 0 for v in config["split"]["train_counts"].values()):
        raise ConfigError("split.train_counts must be >= 0")
    if config["cohort"]["path"] is None:
        values = spec.n_subjects * int(np.prod(spec.grid))
        if values > SIZE_WARNING_VALUES:
            warnings_out.append(
                f"cohort of {spec.n_subjects} subjects on a {'x'.join(map(str, spec.grid))} grid "
                f"({values:,} values) is far beyond desk scale; expect long runtimes and large files")
    return warnings_out


def load_config(path=None, overrides=(), seed=None, out=None):
    """Defaults, then the JSON file at ``path``, then overrides. Returns (config, warnings)."""
    raw = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                given = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read config {path!r}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from None
        raw = _merge(raw, given)
    for text in overrides:
        apply_override(raw, *parse_override(text))
    config = _merge(default_config(), raw)
    if seed is not None:
        config["seed"] = int(seed)
    if out is not None:
        config["out"] = out
    return config, validate_config(config)


def cohort_spec(config, seed):
    d = {k: v for k, v in config["cohort"].items() if k != "path"}
    try:
        return CohortSpec.from_dict({**d, "seed": int(seed)})
    except TypeError as exc:
        raise ConfigError(f"cohort: {exc}") from None


def make_estimator(config, random_state):
    a, s, p = config["architecture"], config["schedule"], config["prediction"]
    return NeuralProcessNormativeModel(
        n_context=config["context"]["M"], conv_channels=tuple(a["conv_channels"]), kernel_size=a["kernel_size"],
        pool_size=a["pool_size"], feature_width=a["feature_width"], joint_widths=tuple(a["joint_widths"]),
        latent_dim=a["latent_dim"], decoder_widths=tuple(a["decoder_widths"]),
        decoder_channels=tuple(a["decoder_channels"]), dropout=a["dropout"], epochs=s["epochs"],
        lr_start=s["lr_start"], lr_end=s["lr_end"], batch_size=s["batch_size"], n_mc=s["n_mc"],
        n_dropout_passes=p["K"], n_latent_samples=p["L"], mc_dropout=p["mc_dropout"],
        quantile_eps=config["quantile"]["eps"], random_state=random_state)


# ---------------------------------------------------------------- pipeline

def cohort_dir(config):
    return config["cohort"]["path"] or os.path.join(config["out"], "cohort")


def rep_dirs(config, repeats):
    if repeats == 1:
        return [config["out"]]
    return [os.path.join(config["out"], f"rep{r:02d}") for r in range(repeats)]


def read_cohort(config):
    path = cohort_dir(config)
    try:
        return load_cohort(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    except (TensorFormatError, KeyError, ValueError) as exc:
        raise InputError(f"cohort at {path!r} is unreadable: {exc}") from None


def fit_run(cohort, config, rep=0):
    """Split, quantile fit, context set and ELBO training for one repetition.

    Returns (estimator, train indices, test indices).
    """
    seed = int(config["seed"]) + rep
    try:
        train_idx, test_idx = split(cohort, SplitProtocol(config["split"]["train_counts"], seed))
    except ValueError as exc:
        raise ConfigError(f"split: {exc}") from None
    est = make_estimator(config, seed)
    try:
        est.fit(cohort.X[train_idx], cohort.Y[train_idx])
    except (TrainingError, FloatingPointError) as exc:
        raise NumericError(f"training failed: {exc}") from None
    return est, train_idx, test_idx


@dataclass
class MethodResult:
    """Novelty results of one normative model on one split."""

    npm_train: np.ndarray
    npm_test: np.ndarray
    scores: object  # NoveltyScores of the test subjects
    aucs: dict = field(default_factory=dict)


@dataclass
class Evaluation:
    test_idx: np.ndarray
    labels: np.ndarray
    methods: dict
    group_maps: dict
    regions: list = None


def _group_aucs(summary, labels, groups, control_rng):
    """Per-group AUC of test patients against healthy test subjects.

    Subjects are ranked by their summary statistic. The abnormality
    probability is a monotone transform of it, but saturates at 1 beyond the
    fitted GEVD support, where it would tie.
    """
    out = {}
    healthy = labels == "healthy"
    for g in groups:
        keep = healthy | (labels == g)
        if np.any(labels == g) and np.any(healthy):
            out[g] = auc(summary[keep], (labels[keep] == g).astype(int))
    rows = np.flatnonzero(healthy)
    if rows.size >= 2:
        perm = rows[control_rng.permutation(rows.size)]
        half = perm.size // 2
        flag = np.zeros(labels.size, dtype=int)
        flag[perm[:half]] = 1
        out[CONTROL_GROUP] = auc(summary[perm], flag[perm])
    return out


def _novelty(npm_train, npm_test, train_labels, test_labels, config):
    nov = config["novelty"]
    kw = {"top_fraction": nov["top_fraction"], "mode": nov["mode"], "block": nov["block"]}
    s_train = summary_statistics(npm_train, **kw)
    s_test = summary_statistics(npm_test, **kw)
    if nov["gevd_population"] == "train_healthy":
        s_train = s_train[train_labels == "healthy"]
    try:
        scores = abnormality_probabilities(s_train, s_test, test_labels)
    except ValueError as exc:
        raise NumericError(f"GEVD fit failed: {exc}") from None
    if not scores.params.converged:
        raise NumericError(f"GEVD fit did not converge ({scores.params})")
    return scores


def evaluate_run(est, cohort, train_idx, test_idx, config, rep=0, masks=None):
    """NP and baseline novelty detection, group maps and region association."""
    labels = np.asarray(cohort.labels, dtype=object)
    groups = list(cohort.spec.group_names)
    rng = Rng(int(config["seed"]) + rep).child("evaluate")
    Xs = est.model_.standardize(cohort.X)
    U = est.transform_targets(cohort.Y)
    try:
        s_tr = est.predict_distribution(cohort.X[train_idx], rng=rng.child("predict"), subject_keys=train_idx)
        s_te = est.predict_distribution(cohort.X[test_idx], rng=rng.child("predict"), subject_keys=test_idx)
        npm_np = (compute_npm(U[train_idx], s_tr), compute_npm(U[test_idx], s_te))
        design = with_intercept(Xs)
        mean, var, _ = baseline_blr_normative(design[train_idx], U[train_idx], design)
        npm_base = compute_npm(U, mean, var)
        npm_base = (npm_base[train_idx], npm_base[test_idx])
    except (FloatingPointError, ValueError) as exc:
        raise NumericError(f"prediction failed: {exc}") from None
    methods = {}
    for name, (n_tr, n_te) in (("np", npm_np), ("baseline", npm_base)):
        scores = _novelty(n_tr, n_te, labels[train_idx], labels[test_idx], config)
        aucs = _group_aucs(scores.summary, labels[test_idx], groups, rng.child("control"))
        methods[name] = MethodResult(n_tr, n_te, scores, aucs)
    maps = group_difference_maps(npm_np[1], labels[test_idx], groups=[g for g in groups
                                                                      if np.any(labels[test_idx] == g)])
    regions = None
    if masks is not None:
        _, pc1 = first_principal_component(Xs)
        regions = []
        for g in groups:
            rows = labels[test_idx] == g
            if rows.sum() >= 3:
                for res in region_association(npm_np[1][rows], masks, Xs[test_idx][rows],
                                              alpha=config["analysis"]["alpha"], scores=pc1[test_idx][rows]):
                    regions.append((g, res))
    return Evaluation(test_idx, labels[test_idx], methods, maps, regions)


def load_masks(path, grid):
    """Region masks JSON: ``{name: [flat voxel indices]}`` or a cohort ``masks.json``."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read region masks {path!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"region masks {path!r} are not valid JSON: {exc}") from None
    if isinstance(data, dict) and "regions" in data:
        data = data["regions"]
    if not isinstance(data, dict) or not data:
        raise InputError(f"region masks {path!r}: expected a non-empty object of index lists")
    total = int(np.prod(grid))
    masks = {}
    for name, idx in data.items():
        arr = np.asarray(idx, dtype=np.int64).ravel()
        if arr.size == 0 or arr.min() < 0 or arr.max() >= total:
            raise InputError(f"region {name!r} in {path!r} is empty or outside the {total}-voxel grid")
        masks[str(name)] = arr
    return masks


# ---------------------------------------------------------------- writers

def _fmt(x):
    return format(float(x), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_evaluation(ev, outdir):
    os.makedirs(os.path.join(outdir, "npm"), exist_ok=True)
    for name, res in ev.methods.items():
        fname = "scores.csv" if name == "np" else f"scores_{name}.csv"
        rows = [(int(i), str(lab), _fmt(s), _fmt(p))
                for i, lab, s, p in zip(ev.test_idx, ev.labels, res.scores.summary, res.scores.probability)]
        _write_csv(os.path.join(outdir, fname), SCORES_COLUMNS, rows)
    _write_json(os.path.join(outdir, "gevd.json"), {k: r.scores.params.to_dict() for k, r in ev.methods.items()})
    save_tensor(os.path.join(outdir, "npm", "np_test.npnt"), ev.methods["np"].npm_test)
    save_tensor(os.path.join(outdir, "npm", "baseline_test.npnt"), ev.methods["baseline"].npm_test)
    for g, vol in ev.group_maps.items():
        save_tensor(os.path.join(outdir, "npm", f"groupdiff_{g}.npnt"), vol)
    if ev.regions is not None:
        rows = [(g, r.region, _fmt(r.r2), _fmt(r.f_stat), _fmt(r.p_value), _fmt(r.p_bonferroni),
                 int(r.significant), r.n) for g, r in ev.regions]
        _write_csv(os.path.join(outdir, "regions.csv"),
                   ["group", "region", "r2", "f_stat", "p_value", "p_bonferroni", "significant", "n"], rows)


def metrics_rows(run_id, evaluations, M):
    """Mean and std (over repetitions) of each method x group AUC."""
    rows = []
    for method in ("np", "baseline"):
        groups = list(evaluations[0].methods[method].aucs)
        for g in groups:
            vals = np.array([ev.methods[method].aucs[g] for ev in evaluations])
            rows.append((run_id, method, g, int(M), _fmt(vals.mean()), _fmt(vals.std())))
    return rows


# ---------------------------------------------------------------- commands

def cmd_generate(config):
    spec = cohort_spec(config, config["seed"])
    path = os.path.join(config["out"], "cohort")
    try:
        cohort = generate(spec)
    except ValueError as exc:
        raise ConfigError(f"cohort: {exc}") from None
    save_cohort(cohort, path)
    counts = {lab: int(np.sum(cohort.labels == lab)) for lab in ["healthy", *spec.group_names]}
    print(f"wrote {cohort.n_subjects} subjects to {path}: "
          + ", ".join(f"{k}={v}" for k, v in counts.items())
          + f"; grid {'x'.join(map(str, cohort.grid))}, {cohort.X.shape[1]} covariates")
    return path


def cmd_train(config, repeats=1):
    cohort = read_cohort(config)
    paths = []
    for rep, outdir in enumerate(rep_dirs(config, repeats)):
        est, train_idx, test_idx = fit_run(cohort, config, rep)
        model_dir = os.path.join(outdir, "model")
        est.save(model_dir)
        _write_json(os.path.join(outdir, "split.json"),
                    {"train": [int(i) for i in train_idx], "test": [int(i) for i in test_idx],
                     "seed": int(config["seed"]) + rep})
        _write_json(os.path.join(outdir, "config.json"), config)
        log = est.model_.train_log
        print(f"rep {rep}: trained M={config['context']['M']} for {len(log)} epochs, "
              f"loss {log[0]['loss']:.4f} -> {log[-1]['loss']:.4f}; model in {model_dir}")
        paths.append(model_dir)
    return paths


def _load_trained(outdir, config):
    model_dir = os.path.join(outdir, "model")
    split_path = os.path.join(outdir, "split.json")
    if not os.path.isdir(model_dir) or not os.path.isfile(split_path):
        raise InputError(f"no trained model in {outdir!r}; run 'train' first")
    try:
        model = NpModel.load(model_dir)
        with open(split_path) as fh:
            sp = json.load(fh)
    except (TensorFormatError, KeyError, ValueError, OSError) as exc:
        raise InputError(f"model in {outdir!r} is unreadable: {exc}") from None
    est = make_estimator(config, model.seed)
    est.model_ = model
    return est, np.asarray(sp["train"], dtype=np.int64), np.asarray(sp["test"], dtype=np.int64)


def cmd_evaluate(config, repeats=1):
    cohort = read_cohort(config)
    masks = None
    if config["analysis"]["region_masks"]:
        masks = load_masks(config["analysis"]["region_masks"], cohort.grid)
    evaluations = []
    for rep, outdir in enumerate(rep_dirs(config, repeats)):
        est, train_idx, test_idx = _load_trained(outdir, config)
        ev = evaluate_run(est, cohort, train_idx, test_idx, config, rep, masks)
        write_evaluation(ev, outdir)
        evaluations.append(ev)
    run_id = os.path.basename(os.path.normpath(config["out"]))
    rows = metrics_rows(run_id, evaluations, est.model_.arch.n_channels)
    path = os.path.join(config["out"], "metrics.csv")
    _write_csv(path, METRICS_COLUMNS, rows)
    for row in rows:
        print(f"{row[1]:>8s} {row[2]:>16s}  AUC {float(row[4]):.3f} +/- {float(row[5]):.3f}")
    return path


def read_metrics(paths):
    """Rows of several metrics.csv files; schema mismatches are reported together."""
    rows, bad = [], []
    for p in paths:
        try:
            with open(p, newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != METRICS_COLUMNS:
                    bad.append(f"{p} (columns {reader.fieldnames})")
                    continue
                rows.extend(reader)
        except OSError as exc:
            bad.append(f"{p} ({exc.strerror})")
    if bad:
        raise InputError("inconsistent or unreadable run metrics: " + "; ".join(bad))
    return rows


def aggregate_metrics(rows):
    """Mean and std of ``auc`` per (method, group, M) across runs."""
    cells = {}
    for r in rows:
        cells.setdefault((r["method"], r["group"], int(r["M"])), []).append(float(r["auc"]))
    out = []
    for key in sorted(cells):
        vals = np.array(cells[key])
        out.append((*key, vals.size, vals.mean(), vals.std()))
    return out


def render_svg(summary, title="AUC by method and M"):
    """Grouped bar chart (groups on x, one bar per method/M) as a standalone SVG string."""
    groups = sorted({s[1] for s in summary})
    series = sorted({(s[0], s[2]) for s in summary})
    value = {(s[0], s[2], s[1]): s[4] for s in summary}
    palette = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"]
    left, top, plot_h = 60, 40, 240
    bar_w, gap = 14, 24
    group_w = bar_w * len(series) + gap
    width = left + group_w * len(groups) + 180
    height = top + plot_h + 80
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<text x="{left}" y="20" font-size="14">{escape(title)}</text>']
    for tick in np.linspace(0, 1, 6):
        y = top + plot_h * (1 - tick)
        parts.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + group_w * len(groups)}" y2="{y:.1f}" '
                     f'stroke="#dddddd"/>')
        parts.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{tick:.1f}</text>')
    chance = top + plot_h * 0.5
    parts.append(f'<line x1="{left}" y1="{chance:.1f}" x2="{left + group_w * len(groups)}" y2="{chance:.1f}" '
                 f'stroke="#999999" stroke-dasharray="4 3"/>')
    for gi, g in enumerate(groups):
        x0 = left + gi * group_w + gap / 2
        for si, (method, M) in enumerate(series):
            v = value.get((method, M, g))
            if v is None:
                continue
            h = plot_h * max(0.0, min(1.0, v))
            parts.append(f'<rect x="{x0 + si * bar_w:.1f}" y="{top + plot_h - h:.1f}" width="{bar_w - 2}" '
                         f'height="{h:.1f}" fill="{palette[si % len(palette)]}">'
                         f'<title>{escape(f"{method} M={M} {g}: {v:.3f}")}</title></rect>')
        parts.append(f'<text x="{x0 + bar_w * len(series) / 2:.1f}" y="{top + plot_h + 16}" '
                     f'text-anchor="middle">{escape(g)}</text>')
    parts.append(f'<text x="16" y="{top + plot_h / 2}" transform="rotate(-90 16 {top + plot_h / 2})" '
                 f'text-anchor="middle">AUC</text>')
    lx = left + group_w * len(groups) + 16
    for si, (method, M) in enumerate(series):
        y = top + 12 + 16 * si
        parts.append(f'<rect x="{lx}" y="{y - 9}" width="10" height="10" fill="{palette[si % len(palette)]}"/>')
        parts.append(f'<text x="{lx + 14}" y="{y}">{escape(f"{method} (M={M})")}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(run_dirs, out):
    if not run_dirs:
        raise InputError("report needs at least one evaluated run directory")
    paths = [os.path.join(d, "metrics.csv") for d in run_dirs]
    missing = [p for p in paths if not os.path.isfile(p)]
    if missing:
        raise InputError("missing metrics.csv (run 'evaluate' first): " + ", ".join(missing))
    summary = aggregate_metrics(read_metrics(paths))
    os.makedirs(out, exist_ok=True)
    _write_csv(os.path.join(out, "summary.csv"), ["method", "group", "M", "n_runs", "auc_mean", "auc_std"],
               [(m, g, M, n, _fmt(mean), _fmt(std)) for m, g, M, n, mean, std in summary])
    with open(os.path.join(out, "report.svg"), "w") as fh:
        fh.write(render_svg(summary))
    print(f"aggregated {len(run_dirs)} run(s) into {out}/summary.csv and {out}/report.svg")
    return out


# ---------------------------------------------------------------- entry point

def build_parser():
    parser = argparse.ArgumentParser(
        prog="npnorm", description="Deep normative modeling with neural processes on volumetric data.",
        epilog="exit codes: 1 internal error, 2 bad input/path, 3 invalid config, 4 numeric failure")
    parser.add_argument("--config", metavar="PATH", help="JSON run configuration")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                        help="dotted config override, e.g. context.M=5 (repeatable)")
    parser.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    parser.add_argument("--out", metavar="DIR", help="run directory")
    parser.add_argument("--repeats", type=int, default=1, help="repetitions with seeds seed..seed+N-1")
    parser.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    sub = parser.add_subparsers(dest="command")
    sub.add_parser("generate", help="draw a synthetic cohort into OUT/cohort")
    sub.add_parser("train", help="split, fit context functions and train the neural process")
    sub.add_parser("evaluate", help="NPMs, GEVD abnormality probabilities, AUCs, region association")
    rep = sub.add_parser("report", help="aggregate evaluated runs into summary.csv and an SVG chart")
    rep.add_argument("runs", nargs="*", metavar="RUN_DIR")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config, warns = load_config(args.config, args.overrides, args.seed, args.out)
        for w in warns:
            print(f"warning: {w}", file=sys.stderr)
        if args.repeats < 1:
            raise ConfigError("--repeats must be >= 1")
        if args.dump_config:
            print(json.dumps(config, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise InputError("no command given")
        if args.command == "generate":
            cmd_generate(config)
        elif args.command == "train":
            cmd_train(config, args.repeats)
        elif args.command == "evaluate":
            cmd_evaluate(config, args.repeats)
        elif args.command == "report":
            cmd_report(args.runs, config["out"])
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FloatingPointError, TrainingError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
