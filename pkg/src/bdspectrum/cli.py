"""Command-line pipeline: synth, build-bfn, harmonize, train, transfer, explain, embed, report.

All commands read one YAML config; ``--seed``, ``--out``, ``--jobs`` and
``--set section.key=value`` override it. Each stage writes into its own
directory under the output root and records a run manifest listing the
files it produced with their checksums.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import reports as R
from .atlas import RSN_NAMES, MultiscaleAtlasSet, adjacent_mappings, load_atlas, save_atlas, synth_hierarchy
from .bfn import build_bfn
from .cohort import Cohort, SyntheticSpec, generate_synthetic, load_cohort, sample_timeseries, save_cohort, split_kfold
from .harmonize import harmonize_cohort
from .interpret import consensus_map, fold_cams, rsn_aggregate
from .model import MahgcnParams, ModelConfig
from .spectrum import (consensus_relation, covariate_association, deep_features, diffusion_embed,
                       partition_asd, relation_matrix)
from .stats import chi_square_2x2, fdr_correct, mann_whitney_u
from .train import CVResult, PreparedData, TrainConfig, cross_validate, predict, prepare
from .transfer import TransferConfig, run_transfer, split_by_group

log = logging.getLogger("bdspectrum")

COMMANDS = ("synth", "build-bfn", "harmonize", "train", "transfer", "explain", "embed", "report")

DEFAULTS = {
    "seed": None,
    "out": "runs/default",
    "jobs": 1,
    "data": {"cohort": None, "atlas": None},
    "synthetic": {
        "n_sites": 3, "subjects_per_site": 40, "class_ratio_per_site": 0.5, "scales": [10, 20, 30],
        "site_shift_magnitude": 0.0, "site_noise_scale": 0.0, "planted_rsn": 6,
        "planted_effect_size": 0.3, "severity_continuum": False, "noise_level": 0.5,
        "planted_scales": None, "site_disorders": None, "scale_expression": 1.0, "timepoints": 0,
    },
    "model": {"hidden_dim": 64, "fl_widths": [256, 64, 16], "dropout": 0.3},
    "train": {"epochs": 150, "lr": 0.01, "lr_late": 0.001, "lr_boundary": 50, "weight_decay": 0.01,
              "per_site_batch": 100, "k_folds": 10, "baselines": True, "n_perm_per_fold": 100},
    "harmonize": {"enabled": False, "foldwise": False, "tol": 1e-6, "max_iter": 200},
    "transfer": {"held_out": None, "shots": [20], "pool": 100, "repetitions": 10, "levels": [1, 2, 3, 4],
                 "pretrain_epochs": 250, "finetune_epochs": 50},
    "explain": {"threshold": 0.5},
    "spectrum": {"alpha": 0.5, "sparsity": 0.9, "n_components": 10},
}


class ConfigError(ValueError):
    pass


class MissingArtifactError(RuntimeError):
    pass


# -- configuration ----------------------------------------------------------------

def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"{key}: unknown config field")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key}: expected a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects section.key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"{dotted}: unknown config section {k!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"{dotted}: unknown config field")
    node[keys[-1]] = yaml.safe_load(raw)


def _check(cond: bool, field_name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{field_name}: {msg}")


def validate_config(cfg: dict) -> None:
    """Field-level checks; raises :class:`ConfigError` naming the field."""
    _check(isinstance(cfg["seed"], int), "seed", "an integer seed is required")
    _check(isinstance(cfg["jobs"], int) and cfg["jobs"] >= 1, "jobs", "must be an integer >= 1")
    for name in ("cohort", "atlas"):
        p = cfg["data"][name]
        _check(p is None or Path(p).exists(), f"data.{name}", f"path {p} does not exist")
    m = cfg["model"]
    _check(isinstance(m["hidden_dim"], int) and m["hidden_dim"] >= 1, "model.hidden_dim", "must be >= 1")
    _check(len(m["fl_widths"]) == 3, "model.fl_widths", "needs three widths")
    _check(0.0 <= m["dropout"] < 1.0, "model.dropout", "must lie in [0, 1)")
    t = cfg["train"]
    _check(t["epochs"] >= 1, "train.epochs", "must be >= 1")
    _check(t["k_folds"] >= 2, "train.k_folds", "must be >= 2")
    _check(t["n_perm_per_fold"] >= 1, "train.n_perm_per_fold", "must be >= 1")
    s = cfg["spectrum"]
    _check(0.0 <= s["sparsity"] < 1.0, "spectrum.sparsity", "must lie in [0, 1)")
    _check(s["n_components"] >= 2, "spectrum.n_components", "must be >= 2")
    tr = cfg["transfer"]
    _check(all(1 <= k <= tr["pool"] for k in tr["shots"]), "transfer.shots", "each K must lie in [1, pool]")
    _check(set(tr["levels"]) <= {1, 2, 3, 4}, "transfer.levels", "levels are 1..4")
    try:
        synthetic_spec(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic: {exc}") from None


def load_config(path: str | None, seed: int | None = None, out: str | None = None, jobs: int | None = None,
                sets: list[str] | None = None) -> dict:
    raw = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
    cfg = _merge(DEFAULTS, raw)
    for a in sets or []:
        _apply_set(cfg, a)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if jobs is not None:
        cfg["jobs"] = jobs
    validate_config(cfg)
    return cfg


def hashed_config(cfg: dict) -> dict:
    """Config fields that determine outputs (``out`` and ``jobs`` excluded)."""
    return {k: v for k, v in cfg.items() if k not in ("out", "jobs")}


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    s = {k: v for k, v in cfg["synthetic"].items() if k != "timepoints"}
    names = {f.name for f in fields(SyntheticSpec)}
    unknown = set(s) - names
    if unknown:
        raise ConfigError(f"synthetic: unknown fields {sorted(unknown)}")
    if isinstance(s.get("noise_level"), list):
        s["noise_level"] = tuple(s["noise_level"])
    return SyntheticSpec(**{**s, "scales": tuple(s["scales"]), "rng_seed": cfg["seed"]})


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], lr=t["lr"], lr_late=t["lr_late"], lr_boundary=t["lr_boundary"],
                       weight_decay=t["weight_decay"], per_site_batch=t["per_site_batch"], seed=cfg["seed"],
                       k_folds=t["k_folds"])


def model_config(cfg: dict, scales) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(tuple(sorted(scales)), m["hidden_dim"], tuple(m["fl_widths"]), m["dropout"])


# -- stage context -------------------------------------------------------------------

@dataclass
class Stage:
    cfg: dict
    command: str

    @property
    def root(self) -> Path:
        return Path(self.cfg["out"])

    @property
    def dir(self) -> Path:
        return self.root / self.command

    @property
    def prov(self) -> dict:
        return R.provenance(hashed_config(self.cfg), self.cfg["seed"], self.command)

    def header(self) -> str:
        p = self.prov
        return f"config_hash={p['config_hash']} seed={p['seed']} version={p['version']} command={p['command']}"

    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing upstream artifact: {what} ({path})")
        return path


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(stage: Stage) -> Path:
    files = sorted(p for p in stage.dir.rglob("*") if p.is_file() and p.name != "run_manifest.json")
    payload = {"provenance": stage.prov, "config": hashed_config(stage.cfg),
               "outputs": {str(p.relative_to(stage.root)): _sha(p) for p in files}}
    path = stage.dir / "run_manifest.json"
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=str) + "\n")
    return path


def _atlas(stage: Stage) -> MultiscaleAtlasSet:
    if stage.cfg["data"]["atlas"]:
        return load_atlas(stage.cfg["data"]["atlas"])
    return load_atlas(stage.require(stage.root / "synth" / "atlas.json", "atlas (run synth or set data.atlas)"))


def _network_cohort(stage: Stage, allow_harmonized: bool = True) -> Cohort:
    """Networks feeding model stages, following the pipeline order."""
    root = stage.root
    if allow_harmonized and stage.cfg["harmonize"]["enabled"] and not stage.cfg["harmonize"]["foldwise"]:
        return load_cohort(stage.require(root / "harmonize" / "manifest.csv", "harmonized networks"), "network")
    for cand in (root / "build-bfn" / "manifest.csv", root / "synth" / "networks" / "manifest.csv"):
        if cand.exists():
            return load_cohort(cand, "network")
    if stage.cfg["data"]["cohort"]:
        cohort = load_cohort(stage.cfg["data"]["cohort"])
        if all(s.networks for s in cohort.subjects):
            return cohort
    raise MissingArtifactError("missing upstream artifact: network cohort (run synth or build-bfn)")


# -- commands -------------------------------------------------------------------------

def cmd_synth(stage: Stage) -> None:
    spec = synthetic_spec(stage.cfg)
    atlas = synth_hierarchy(spec.scales, seed=stage.cfg["seed"])
    cohort = generate_synthetic(spec, atlas)
    stage.dir.mkdir(parents=True, exist_ok=True)
    save_atlas(atlas, stage.dir / "atlas.json")
    save_cohort(cohort, stage.dir / "networks", "networks", stage.header())
    t = stage.cfg["synthetic"]["timepoints"]
    if t:
        rng = np.random.default_rng((stage.cfg["seed"], 7))
        signals = []
        for s in cohort.subjects:
            signals.append({k: sample_timeseries(s.networks[k], t, rng) for k in cohort.scales})
        ts = Cohort(tuple(replace(s, signals=sig, networks={}) for s, sig in zip(cohort.subjects, signals)),
                    cohort.scales)
        save_cohort(ts, stage.dir / "timeseries", "signals", stage.header())


def cmd_build_bfn(stage: Stage) -> None:
    src = stage.cfg["data"]["cohort"]
    if src is None:
        src = stage.require(stage.root / "synth" / "timeseries" / "manifest.csv",
                            "time-series cohort (set synthetic.timepoints or data.cohort)")
    cohort = load_cohort(src, "timeseries")
    nets = {k: np.stack([build_bfn(s.signals[k]) for s in cohort.subjects]) for k in cohort.scales}
    out = cohort.with_networks(nets)
    save_cohort(out, stage.dir, "networks", stage.header())


def cmd_harmonize(stage: Stage) -> None:
    cohort = _network_cohort(stage, allow_harmonized=False)
    h = stage.cfg["harmonize"]
    harmonized, models = harmonize_cohort(cohort, tol=h["tol"], max_iter=h["max_iter"])
    save_cohort(harmonized, stage.dir, "networks", stage.header())
    for scale, model in models.items():
        R.write_json(stage.dir / f"combat_scale{scale}.json", model.to_dict(), stage.prov)


def _foldwise_data(cohort: Cohort, splits, h: dict) -> list[PreparedData]:
    out = []
    for tr, _ in splits:
        harmonized, _ = harmonize_cohort(cohort, fit_index=tr, tol=h["tol"], max_iter=h["max_iter"])
        out.append(prepare(harmonized))
    return out


def _write_predictions(path: Path, cv: CVResult, cohort: Cohort, header: str) -> None:
    ids = [s.subject_id for s in cohort.subjects]
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "fold", "subject_id", "site_id", "label", "score"])
        for m in cv.methods:
            for fr in cv.folds[m]:
                for i, sc, y, site in zip(fr.test_index, fr.scores, fr.test_labels, fr.test_sites):
                    w.writerow([m, fr.fold, ids[i], site, int(y), repr(float(sc))])


def cmd_train(stage: Stage) -> None:
    cfg = stage.cfg
    cohort = _network_cohort(stage)
    atlas = _atlas(stage)
    tc = train_config(cfg)
    mc = model_config(cfg, cohort.scales)
    splits = split_kfold(len(cohort), tc.k_folds, tc.seed)
    fold_data = None
    if cfg["harmonize"]["enabled"] and cfg["harmonize"]["foldwise"]:
        fold_data = _foldwise_data(cohort, splits, cfg["harmonize"])
    cv = cross_validate(cohort, atlas, mc, tc, baselines=cfg["train"]["baselines"], jobs=cfg["jobs"],
                        splits=splits, fold_data=fold_data)
    ck = stage.dir / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    for m in cv.methods:
        tag = m.replace(" ", "_")
        for fr in cv.folds[m]:
            fr.params.save(ck / f"{tag}_fold{fr.fold}.ckpt")
    R.write_json(stage.dir / "splits.json", {"folds": [{"train": tr, "test": te} for tr, te in splits]}, stage.prov)
    _write_predictions(stage.dir / "predictions.csv", cv, cohort, stage.header())
    rows = []
    for m in cv.methods:
        for fr in cv.folds[m]:
            for scope, rec in (("site_averaged", fr.site_averaged), ("global", fr.global_metrics)):
                rows.append([m, fr.fold, scope, *rec.as_dict().values()])
    R.write_table(stage.dir / "fold_metrics", ["method", "fold", "scope", "ACC", "SEN", "SPE", "AUC"], rows,
                  stage.prov)
    R.write_table(stage.dir / "table1", *R.table1(cv), stage.prov)
    R.write_table(stage.dir / "table2", *R.table2(cv, n_perm_per_fold=cfg["train"]["n_perm_per_fold"],
                                                 seed=cfg["seed"]), stage.prov)


def cmd_transfer(stage: Stage) -> None:
    cfg = stage.cfg
    t = cfg["transfer"]
    cohort = _network_cohort(stage)
    atlas = _atlas(stage)
    data = prepare(cohort)
    held = t["held_out"] or [sorted(set(data.sites.tolist()))[-1]]
    held = [held] if isinstance(held, str) else list(held)
    source, target = split_by_group(data, held)
    mc = model_config(cfg, cohort.scales)
    checkpoint = None
    for k in t["shots"]:
        tcfg = TransferConfig(t["pretrain_epochs"], t["finetune_epochs"], k, t["pool"], t["repetitions"],
                              tuple(t["levels"]))
        result, checkpoint = run_transfer(source, target, mc, adjacent_mappings(atlas), train_config(cfg), tcfg,
                                          seed=cfg["seed"], checkpoint=checkpoint)
        R.write_table(stage.dir / f"table3_k{k}", *R.table3(result), {**stage.prov, "held_out": ",".join(held)})
    checkpoint.save(stage.dir / "pretrained.ckpt")


def _load_cv_models(stage: Stage) -> tuple[list[MahgcnParams], list[tuple[np.ndarray, np.ndarray]], dict]:
    train_dir = stage.root / "train"
    splits_doc = json.loads(stage.require(train_dir / "splits.json", "train splits").read_text())
    splits = [(np.array(f["train"], int), np.array(f["test"], int)) for f in splits_doc["folds"]]
    models = [MahgcnParams.load(stage.require(train_dir / "checkpoints" / f"MAHGCN_fold{f}.ckpt",
                                              f"MAHGCN checkpoint fold {f}")) for f in range(len(splits))]
    aucs = {}
    with open(stage.require(train_dir / "fold_metrics.csv", "fold metrics")) as fh:
        rows = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
        for r in rows:
            if r["method"] == "MAHGCN" and r["scope"] == "global":
                aucs[int(r["fold"])] = float(r["AUC"])
    return models, splits, aucs


def cmd_explain(stage: Stage) -> None:
    cfg = stage.cfg
    cohort = _network_cohort(stage)
    atlas = _atlas(stage)
    data = prepare(cohort)
    models, splits, aucs = _load_cv_models(stage)
    groups: dict[str, dict[int, list]] = {}
    per_fold_rsn = []
    for f, (params, (_, te)) in enumerate(zip(models, splits)):
        test = data.take(te)
        scores = predict(params, test)
        cams = fold_cams(params, test.adjacency, test.labels, scores, f, test.sites, cfg["explain"]["threshold"])
        for g, maps in cams.items():
            groups.setdefault(g, {})[f] = maps
        if cams:
            single = consensus_map({g: {f: m} for g, m in cams.items()}, {f: 1.0})
            agg = rsn_aggregate(single, atlas)
            for scale, vec in agg.items():
                per_fold_rsn.append([f, scale, *vec])
    if not groups:
        raise MissingArtifactError("no correctly predicted BD subjects to explain")
    for g in groups:
        for f in range(len(splits)):
            groups[g].setdefault(f, [])
    fold_aucs = {f: (aucs.get(f, 0.5) if np.isfinite(aucs.get(f, np.nan)) else 0.5) for f in range(len(splits))}
    cam = consensus_map(groups, fold_aucs)
    for scale, scores in cam.scores.items():
        labels = atlas.scales[atlas.index_of(scale)].rsn_label
        R.write_table(stage.dir / f"cam_scale{scale}", ["roi", "rsn", "score"],
                      [[i, RSN_NAMES[labels[i]], float(v)] for i, v in enumerate(scores)], stage.prov)
    agg = rsn_aggregate(cam, atlas)
    R.write_table(stage.dir / "rsn_table", ["scale", *RSN_NAMES],
                  [[scale, *agg[scale]] for scale in sorted(agg)], stage.prov)
    R.write_table(stage.dir / "rsn_by_fold", ["fold", "scale", *RSN_NAMES], per_fold_rsn, stage.prov)


def cmd_embed(stage: Stage) -> None:
    cfg = stage.cfg
    sp = cfg["spectrum"]
    cohort = _network_cohort(stage)
    data = prepare(cohort)
    models, _, aucs = _load_cv_models(stage)
    mats = [relation_matrix(deep_features(p, data.adjacency)) for p in models]
    weights = [aucs.get(f, 0.5) if np.isfinite(aucs.get(f, np.nan)) else 0.5 for f in range(len(models))]
    rel = consensus_relation(mats, weights)
    n_comp = min(sp["n_components"], len(cohort) - 2)
    emb = diffusion_embed(rel, n_comp, sp["alpha"], sp["sparsity"])
    ids = [s.subject_id for s in cohort.subjects]
    diag = np.array([s.diagnosis for s in cohort.subjects])
    R.write_table(stage.dir / "embedding", ["subject_id", "diagnosis", *(f"gradient{i + 1}" for i in range(n_comp))],
                  [[ids[i], diag[i], *emb.coordinates[i]] for i in range(len(ids))],
                  {**stage.prov, "connected": emb.connected})
    R.write_table(stage.dir / "lambdas", ["component", "lambda"],
                  [[i + 1, v] for i, v in enumerate(emb.lambdas)], stage.prov)

    g = emb.coordinates
    ok = np.all(np.isfinite(g[:, :2]), axis=1)
    rows, raw = [], []
    for d in sorted(set(diag.tolist()) - {"HC"}):
        for j in range(2):
            a, b = g[ok & (diag == d), j], g[ok & (diag == "HC"), j]
            if a.size and b.size:
                res = mann_whitney_u(a, b)
                rows.append([f"{d} vs HC", f"gradient{j + 1}", res.statistic, res.pvalue])
                raw.append(res.pvalue)
    adj = fdr_correct(raw) if raw else []
    rows = [r + [p] for r, p in zip(rows, adj)]
    ages = np.array([s.age for s in cohort.subjects])
    genders = np.array([s.gender for s in cohort.subjects])
    for j in range(2):
        for name, cov in (("age", ages), ("gender", genders)):
            try:
                stat, p = covariate_association(g[ok, j], cov[ok])
            except ValueError:
                continue
            rows.append([f"{name} association", f"gradient{j + 1}", stat, p, p])
    sev = np.array([np.nan if s.severity is None else s.severity for s in cohort.subjects])
    if np.all(np.isfinite(sev)):
        from scipy.stats import spearmanr
        rho, p = spearmanr(g[ok, 0], sev[ok])
        rows.append(["severity spearman", "gradient1", float(rho), float(p), float(p)])
    if {"ADHD", "ASD"} <= set(diag.tolist()):
        part = partition_asd(g[:, :2], diag)
        R.write_table(stage.dir / "asd_partition", ["subject_id", "subtype"],
                      sorted([[ids[i], k] for k, idx in part.items() for i in idx]), stage.prov)
        male = genders == "M"
        table = [[int(np.sum(male[part[k]])), int(np.sum(~male[part[k]]))] for k in ("ADHD_like", "MCI_like")]
        try:
            stat, p = chi_square_2x2(table)
            rows.append(["ASD subtype x gender chi2", "gradient1-2", stat, p, p])
        except ValueError:
            pass
    R.write_table(stage.dir / "group_stats", ["comparison", "axis", "statistic", "p", "p_fdr"], rows, stage.prov)


def cmd_report(stage: Stage) -> None:
    summary = {}
    for sub in ("train", "transfer", "explain", "embed"):
        d = stage.root / sub
        if not d.exists():
            continue
        for p in sorted(d.glob("*.json")):
            if p.name == "run_manifest.json" or p.name.startswith("combat"):
                continue
            doc = json.loads(p.read_text())
            if "rows" in doc:
                summary[f"{sub}/{p.stem}"] = {"columns": doc["columns"], "rows": doc["rows"]}
    if not summary:
        raise MissingArtifactError("nothing to report: run train/transfer/explain/embed first")
    R.write_json(stage.dir / "summary.json", {"tables": summary}, stage.prov)
    rows = []
    for name, tab in summary.items():
        for r in tab["rows"]:
            rows.append([name, json.dumps(r, sort_keys=True, ensure_ascii=False)])
    R.write_table(stage.dir / "summary", ["table", "row"], rows, stage.prov)


HANDLERS = {
    "synth": cmd_synth, "build-bfn": cmd_build_bfn, "harmonize": cmd_harmonize, "train": cmd_train,
    "transfer": cmd_transfer, "explain": cmd_explain, "embed": cmd_embed, "report": cmd_report,
}


def run_command(command: str, cfg: dict) -> Path:
    stage = Stage(cfg, command)
    stage.dir.mkdir(parents=True, exist_ok=True)
    HANDLERS[command](stage)
    return write_manifest(stage)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdspectrum", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "pipeline"):
        p = sub.add_parser(name, help="run every stage in order" if name == "pipeline" else f"run the {name} stage")
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--jobs", type=int, help="worker processes for fold-level parallelism")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. train.epochs=20")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out, args.jobs, args.set)
        if args.command == "pipeline":
            stages = ["synth"]
            if cfg["synthetic"]["timepoints"] or cfg["data"]["cohort"]:
                stages.append("build-bfn")
            if cfg["harmonize"]["enabled"] and not cfg["harmonize"]["foldwise"]:
                stages.append("harmonize")
            stages += ["train"] + (["transfer"] if cfg["transfer"]["shots"] else []) + ["explain", "embed", "report"]
            for name in stages:
                if name == "synth" and cfg["data"]["cohort"]:
                    continue
                print(f"{name}: {run_command(name, cfg)}")
        else:
            print(run_command(args.command, cfg))
    except (ConfigError, MissingArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
