"""Command-line pipeline: prepare, train, evaluate, audit, sweep.

Every command works inside one ``--workdir``::

    dataset.bin     prepared split bundle         (prepare)
    summary.tsv     edges/users/items/categories  (prepare)
    model.ckpt      best checkpoint               (train)
    history.tsv     per-epoch training log        (train)
    params.tsv      parameter accounting          (train)
    report.json     grouped utility and fairness  (evaluate)
    group_curves.tsv, rankings.tsv, partition_*.tsv
    audit.json, audit.tsv                         (audit)

Configuration comes from dataclass defaults, then an optional flat
``key = value`` file (``--config``), then command-line flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cohort, ingest, metrics, model, train
from .errors import CompatibilityError, ConfigurationError, DivergenceError, FairRecError
from .graph import build_bipartite, load_edge_weights

log = logging.getLogger("fairrec")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
SAMPLE_STRATEGIES = ("none", "fixed_count", "per_category_proportion")


@dataclass
class ExperimentConfig:
    workdir: str = "run"
    interactions: str | None = None
    categories: str | None = None
    delimiter: str = "\t"
    min_degree: int = 5
    min_item_degree: int = 1
    train_ratio: float = 0.6
    val_ratio: float = 0.2
    test_ratio: float = 0.2
    seed: int = 0
    sample: str = "none"
    sample_value: float = 0.0
    dim: int = 32
    interests: int = 4
    hops: int = 1
    temperature: float = 2.0
    single_interest: bool = False
    learning_rate: float = 0.001
    batch_size: int = 2048
    l2_coeff: float = 0.001
    patience: int = 25
    max_epochs: int = 1000
    eval_every: int = 1
    k_top: int = 20
    strategy: str = "kmeans"
    groups: str = "auto"
    edge_weights: str | None = None
    item_embeddings: str | None = None
    sweep_hops: str = "1,2,3"
    sweep_interests: str = "2,4,8,16"

    def validate(self) -> None:
        if self.dim < 1 or self.interests < 1 or self.hops < 1:
            raise ConfigurationError("dim, interests and hops must be >= 1")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be > 0")
        if self.sample not in SAMPLE_STRATEGIES:
            raise ConfigurationError(f"sample must be one of {SAMPLE_STRATEGIES}, got {self.sample!r}")
        if self.strategy not in cohort.STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.groups != "auto":
            try:
                if int(self.groups) < 1:
                    raise ValueError
            except ValueError:
                raise ConfigurationError(f"groups must be 'auto' or a positive integer, got {self.groups!r}") from None
        if self.strategy != "kmeans" and self.groups == "auto":
            raise ConfigurationError(f"strategy {self.strategy} needs an explicit group count")
        self.train_config()

    def train_config(self) -> train.TrainConfig:
        return train.TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            l2_coeff=self.l2_coeff,
            patience=self.patience,
            max_epochs=self.max_epochs,
            seed=substream_seed(self.seed, "triples"),
            eval_every=self.eval_every,
            k_top=self.k_top,
        )

    @property
    def n_groups(self):
        return "auto" if self.groups == "auto" else int(self.groups)

    def dump(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if f.name == "delimiter":
                value = value.encode("unicode_escape").decode("ascii")
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {
    "workdir": str, "interactions": str, "categories": str, "delimiter": str,
    "min_degree": int, "min_item_degree": int, "train_ratio": float, "val_ratio": float,
    "test_ratio": float, "seed": int, "sample": str, "sample_value": float, "dim": int,
    "interests": int, "hops": int, "temperature": float, "single_interest": bool,
    "learning_rate": float, "batch_size": int, "l2_coeff": float, "patience": int,
    "max_epochs": int, "eval_every": int, "k_top": int, "strategy": str, "groups": str,
    "edge_weights": str, "item_embeddings": str, "sweep_hops": str, "sweep_interests": str,
}


def _coerce(name: str, raw):
    kind = _FIELD_TYPES[name]
    if not isinstance(raw, str):
        return raw
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {raw!r}")
    if name == "delimiter":
        return raw.encode("ascii").decode("unicode_escape")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def read_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{line_no}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigurationError(f"{path}:{line_no}: unknown key {key!r}")
            values[key] = _coerce(key, value)
    return values


def substream_seed(root: int, name: str) -> int:
    """Deterministic child seed of ``root`` for a named random stream."""
    seq = np.random.SeedSequence(entropy=root, spawn_key=(zlib.crc32(name.encode()),))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


# --------------------------------------------------------------------------
# shared helpers


def _paths(cfg: ExperimentConfig) -> dict:
    root = Path(cfg.workdir)
    names = {
        "bundle": "dataset.bin", "summary": "summary.tsv", "config": "config.txt",
        "checkpoint": "model.ckpt", "history": "history.tsv", "params": "params.tsv",
        "report": "report.json", "curves": "group_curves.tsv", "rankings": "rankings.tsv",
        "partition_cat": "partition_cat.tsv", "partition_emb": "partition_emb.tsv",
        "audit": "audit.json", "audit_table": "audit.tsv",
    }
    return {key: root / name for key, name in names.items()}


def _graph(cfg, splits):
    g = build_bipartite(splits.train, splits.n_users, splits.n_items)
    if cfg.edge_weights:
        g = load_edge_weights(cfg.edge_weights, g, splits.dataset.user_keys,
                              splits.dataset.item_keys, cfg.delimiter)
    return g


def load_item_embeddings(path, item_keys, delimiter="\t") -> np.ndarray:
    """Read ``item_key, x_1, ..., x_d`` rows; every item must be present."""
    index = {k: n for n, k in enumerate(item_keys)}
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\r\n").split(delimiter)
            if len(parts) < 2 or parts[0] not in index:
                continue
            rows[index[parts[0]]] = [float(x) for x in parts[1:]]
    if len(rows) != len(item_keys):
        raise ConfigurationError(f"{path}: embeddings cover {len(rows)} of {len(item_keys)} items")
    return np.array([rows[i] for i in range(len(item_keys))], dtype=np.float64)


def _item_embeddings(cfg, splits, params):
    if cfg.item_embeddings:
        return load_item_embeddings(cfg.item_embeddings, splits.dataset.item_keys, cfg.delimiter)
    return params.centers[splits.n_users:]


def _write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")


def _fmt(x):
    return "nan" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def _json_value(x):
    if x is None:
        return None
    x = float(x)
    return None if np.isnan(x) else x


# --------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: ExperimentConfig) -> dict:
    if not cfg.interactions:
        raise ConfigurationError("prepare needs --interactions")
    paths = _paths(cfg)
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    ds = ingest.load_interactions(cfg.interactions, cfg.delimiter, cfg.categories)
    ds = ingest.preprocess(ds, cfg.min_degree, cfg.min_item_degree)
    if cfg.sample != "none":
        kwargs = ({"count": int(cfg.sample_value)} if cfg.sample == "fixed_count"
                  else {"proportion": float(cfg.sample_value)})
        ds = ingest.sample_items(ds, seed=substream_seed(cfg.seed, "sample"), **kwargs)
        ds = ingest.preprocess(ds, cfg.min_degree, cfg.min_item_degree)
    splits = ingest.split(ds, (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio),
                          seed=substream_seed(cfg.seed, "split"))
    ingest.save_bundle(paths["bundle"], splits)
    ingest.load_bundle(paths["bundle"])  # validates the checksum round trip
    stats = ingest.dataset_statistics(ds)
    _write_tsv(paths["summary"], list(stats), [list(stats.values())])
    paths["config"].write_text(cfg.dump(), encoding="utf-8")
    log.info("prepared %s", stats)
    return stats


def _load_bundle(cfg):
    path = _paths(cfg)["bundle"]
    if not path.exists():
        raise ConfigurationError(f"{path} does not exist; run prepare first")
    return ingest.load_bundle(path)


def cmd_train(cfg: ExperimentConfig) -> train.FitResult:
    paths = _paths(cfg)
    splits = _load_bundle(cfg)
    g = _graph(cfg, splits)
    p0 = model.init(g.n_nodes, cfg.dim, cfg.interests, cfg.hops,
                    seed=substream_seed(cfg.seed, "init"),
                    temperature=cfg.temperature, single_interest=cfg.single_interest)
    backbone = model.parameter_count(splits.n_users, splits.n_items, cfg.dim, cfg.interests,
                                     cfg.hops, single_interest=True)
    total = model.parameter_count(splits.n_users, splits.n_items, cfg.dim, cfg.interests,
                                  cfg.hops, cfg.single_interest)
    _write_tsv(paths["params"], ["backbone", "extra", "total"], [[backbone, total - backbone, total]])
    log.info("parameters: backbone %d, extra %d, total %d", backbone, total - backbone, total)

    records = []

    def write_history():
        _write_tsv(paths["history"], ["epoch", "mean_loss", "val_recall@20", "wall_seconds"],
                   [[r.epoch, repr(r.mean_loss), _fmt(r.val_recall), f"{r.wall_seconds:.4f}"]
                    for r in records])

    try:
        result = train.fit(g, splits, p0, cfg.train_config(), on_epoch=records.append)
    except DivergenceError as exc:
        model.save_checkpoint(paths["checkpoint"], exc.last_good)
        write_history()
        raise
    model.save_checkpoint(paths["checkpoint"], result.params)
    model.load_checkpoint(paths["checkpoint"])
    write_history()
    return result


def _partitions(cfg, splits, params):
    train_items = splits.items_by_user("train")
    kseed = substream_seed(cfg.seed, "kmeans")
    parts, scores = {}, {}
    if splits.dataset.has_categories:
        scores["cat"] = cohort.diversity_scores(train_items, "category", splits.dataset.category_of)
    scores["emb"] = cohort.diversity_scores(
        train_items, "embedding", item_embeddings=_item_embeddings(cfg, splits, params)
    )
    for name, sc in scores.items():
        parts[name] = cohort.partition(sc, cfg.strategy, cfg.n_groups, seed=kseed)
    return parts


def cmd_evaluate(cfg: ExperimentConfig, checkpoint=None) -> dict:
    paths = _paths(cfg)
    splits = _load_bundle(cfg)
    params = model.load_checkpoint(checkpoint or paths["checkpoint"])
    g = _graph(cfg, splits)
    mismatches = []
    if params.n_nodes != g.n_nodes:
        mismatches.append(f"N: checkpoint {params.n_nodes} vs bundle {g.n_nodes}")
    if params.dim != cfg.dim:
        mismatches.append(f"d: checkpoint {params.dim} vs config {cfg.dim}")
    if mismatches:
        raise CompatibilityError("; ".join(mismatches))
    state = model.forward(g, params)
    parts = _partitions(cfg, splits, params)
    rankings = metrics.compute_rankings(state, splits, cfg.k_top)
    report = metrics.group_eval(state, splits, parts, cfg.k_top, rankings=rankings)
    payload = report.to_dict()

    emb = _item_embeddings(cfg, splits, params)
    lists = [t for t in rankings.top]
    diversity = {"emb": metrics.recommendation_diversity(lists, "embedding", item_embeddings=emb)}
    if splits.dataset.has_categories:
        diversity["cat"] = metrics.recommendation_diversity(
            lists, "category", category_of=splits.dataset.category_of)
    primary = "cat" if "cat" in parts else "emb"
    matched = metrics.matched_interest_stats(state, lists, parts[primary])
    payload["recommendation_diversity"] = diversity
    payload["matched_interests"] = [_json_value(x) for x in matched]
    payload["groups"] = {name: {"n_groups": p.n_groups, "strategy": p.strategy,
                                "sizes": p.sizes().tolist(), "empty": list(p.empty_groups)}
                         for name, p in parts.items()}
    payload["model"] = {"dim": params.dim, "interests": params.n_interests,
                        "hops": params.n_layers, "temperature": params.temperature,
                        "single_interest": params.single_interest}
    metrics.write_report(paths["report"], payload)
    json.loads(paths["report"].read_text(encoding="utf-8"))

    k = cfg.k_top
    curves = {
        f"recall_at_{k}": [g_["recall"] for g_ in report.per_group],
        f"ndcg_at_{k}": [g_["ndcg"] for g_ in report.per_group],
        "alignment": [g_["alignment"] for g_ in report.per_group],
        "matched_interests": [_json_value(x) for x in matched],
    }
    if report.per_group_emb:
        curves[f"recall_at_{k}_emb"] = [g_["recall"] for g_ in report.per_group_emb]
        curves["alignment_emb"] = [g_["alignment"] for g_ in report.per_group_emb]
    metrics.write_group_curves(paths["curves"], curves)
    item_keys = splits.dataset.item_keys
    _write_tsv(paths["rankings"], ["user_key", "ranked_item_keys"],
               [[key, ",".join(item_keys[i] for i in rankings.top[u])]
                for u, key in enumerate(splits.dataset.user_keys)])
    for name, part in parts.items():
        cohort.write_partition(paths[f"partition_{name}"], part, splits.dataset.user_keys)
    return payload


def cmd_audit(cfg: ExperimentConfig, checkpoint=None) -> dict:
    """Group-level diversity of train vs test and train vs train+test."""
    paths = _paths(cfg)
    splits = _load_bundle(cfg)
    ds = splits.dataset
    if ds.has_categories:
        mode, kwargs = "category", {"category_of": ds.category_of}
    else:
        if cfg.item_embeddings:
            emb = load_item_embeddings(cfg.item_embeddings, ds.item_keys, cfg.delimiter)
        else:
            ck = Path(checkpoint or paths["checkpoint"])
            if not ck.exists():
                raise ConfigurationError("audit without categories needs item embeddings or a checkpoint")
            emb = model.load_checkpoint(ck).centers[splits.n_users:]
        mode, kwargs = "embedding", {"item_embeddings": emb}
    tr = splits.items_by_user("train")
    te = splits.items_by_user("test")
    both = [np.concatenate([a, b]) for a, b in zip(tr, te)]
    d_train = cohort.diversity_scores(tr, mode, **kwargs)
    d_test = cohort.diversity_scores(te, mode, **kwargs)
    d_both = cohort.diversity_scores(both, mode, **kwargs)
    part = cohort.partition(d_train, cfg.strategy, cfg.n_groups, seed=substream_seed(cfg.seed, "kmeans"))
    means = {}
    for name, sc in (("train", d_train), ("test", d_test), ("train+test", d_both)):
        m, _ = metrics._group_means(sc.scores, part)
        means[name] = m
    usable = ~(np.isnan(means["train"]) | np.isnan(means["test"]) | np.isnan(means["train+test"]))
    excluded = np.flatnonzero(~usable).tolist()
    if excluded:
        log.warning("groups %s lack test diversity and are excluded", excluded)
    table = {}
    for other in ("test", "train+test"):
        row = {}
        for method in ("pearson", "spearman", "kendall"):
            try:
                row[method] = metrics.correlation(means["train"][usable], means[other][usable], method)
            except (FairRecError, ValueError) as exc:
                log.warning("train/%s %s correlation undefined: %s", other, method, exc)
                row[method] = None
        table[f"train/{other}"] = row
    payload = {
        "mode": mode,
        "n_groups": part.n_groups,
        "excluded_groups": excluded,
        "group_means": {k: [_json_value(x) for x in v] for k, v in means.items()},
        "correlation": table,
    }
    metrics.write_report(paths["audit"], payload)
    _write_tsv(paths["audit_table"], ["metric", "train/test", "train/train+test"],
               [[m, _fmt(table["train/test"][m]), _fmt(table["train/train+test"][m])]
                for m in ("pearson", "spearman", "kendall")])
    return payload


def cmd_sweep(cfg: ExperimentConfig) -> list:
    """Train and evaluate every (hops, interests) cell into ``workdir/sweep``."""
    hops = [int(x) for x in cfg.sweep_hops.split(",") if x.strip()]
    ks = [int(x) for x in cfg.sweep_interests.split(",") if x.strip()]
    base = Path(cfg.workdir)
    bundle = _paths(cfg)["bundle"]
    rows = []
    for n_hops in hops:
        for k in ks:
            cell = dataclasses.replace(cfg, hops=n_hops, interests=k,
                                       workdir=str(base / "sweep" / f"L{n_hops}_K{k}"))
            Path(cell.workdir).mkdir(parents=True, exist_ok=True)
            (Path(cell.workdir) / "dataset.bin").write_bytes(bundle.read_bytes())
            cmd_train(cell)
            rep = cmd_evaluate(cell)
            kk = cfg.k_top
            rows.append([n_hops, k, _fmt(rep[f"recall_at_{kk}"]), _fmt(rep[f"ndcg_at_{kk}"]),
                         _fmt(rep["unfairness_cat"]), _fmt(rep["unfairness_emb"])])
    _write_tsv(base / "sweep.tsv",
               ["hops", "interests", f"recall_at_{cfg.k_top}", f"ndcg_at_{cfg.k_top}",
                "unfairness_cat", "unfairness_emb"], rows)
    return rows


# --------------------------------------------------------------------------
# argument parsing


def _add_config_flags(parser):
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = _FIELD_TYPES[f.name]
        if kind is bool:
            parser.add_argument(flag, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        else:
            parser.add_argument(flag, dest=f.name, default=None, type=str,
                                metavar=f.name.upper())
    parser.add_argument("--config", default=None, help="flat key = value config file")
    parser.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairrec", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("prepare", "load, filter, split and write the dataset bundle"),
        ("train", "train a model on the prepared bundle"),
        ("evaluate", "grouped utility, fairness, alignment and diversity report"),
        ("audit", "train/test interest-diversity correlation report"),
        ("sweep", "train and evaluate a hops x interests grid"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        if name in ("evaluate", "audit"):
            p.add_argument("--checkpoint", default=None)
    return parser


def resolve_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for f in dataclasses.fields(ExperimentConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            values[f.name] = _coerce(f.name, raw)
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        if args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint)
        elif args.command == "audit":
            cmd_audit(cfg, args.checkpoint)
        else:
            cmd_sweep(cfg)
    except ConfigurationError as exc:
        print(f"fairrec: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"fairrec: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FairRecError, OSError) as exc:
        print(f"fairrec: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
