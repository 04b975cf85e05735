"""Command-line entry points: pretrain, train, evaluate, simulate.

Flags use the same dotted names as the config file (`--train.eta 0.02`) and
take precedence over it; `--seed` and `--threads` are shorthands for
`train.seed` and `train.threads`. Exit codes: 0 ok, 2 config error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from .config import (
    REGISTRY,
    ExperimentConfig,
    build_config,
    pretrain_eta,
    read_config_file,
)
from .data import SplitDataset, leave_one_out_split, load_interactions
from .errors import ConfigError, DataError, NumericError
from .evaluation import UserEvalModel, evaluate_cutoffs
from .gnn import EmbeddingTable, init_table, load_checkpoint, save_checkpoint
from .client import infer_user_embedding
from .pretrain import assemble_pretraining_graph, pretrain
from .privacy import LdpConfig, privacy_budget, sample_pseudo_items
from .rng import substream
from .server import (
    augmentation_settings,
    privacy_settings,
    build_eval_models,
    eval_weights,
    run_training,
)

COMMANDS = ("pretrain", "train", "evaluate", "simulate")
_ABLATION_SUGAR = {
    "no_pretrain": "ablation.no_pretrain",
    "no_personalization": "ablation.no_personalization",
    "no_clustering": "ablation.no_clustering",
}

USAGE = """\
usage: fedrec COMMAND [options]

commands:
  pretrain   contrastive warm-up only; writes pretrained.txt + pretrain_summary.json
  train      federated training; writes checkpoint.txt, rounds.jsonl, clusters.csv, results.json
  evaluate   rank a checkpoint; writes results.json
  simulate   pretrain, then train warm-started from it

options:
  --config PATH        flat `key = value` config file
  --out DIR            output directory (default: current directory)
  --checkpoint PATH    checkpoint to evaluate (evaluate)
  --warm-start PATH    warm-start checkpoint (train)
  --seed N             shorthand for train.seed
  --threads N          shorthand for train.threads
  --no_pretrain / --no_personalization / --no_clustering
  --SECTION.KEY VALUE  override any config key, e.g. --train.eta 0.02
"""


def _parse_args(argv: list[str]):
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        return None
    command = argv[0]
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {COMMANDS}")
    options = {"out": ".", "config": None, "checkpoint": None, "warm_start": None}
    overrides: dict[str, str] = {}
    i = 1
    while i < len(argv):
        token = argv[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        body = token[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        elif body in _ABLATION_SUGAR:
            key, value = body, "true"
            i += 1
        else:
            if i + 1 >= len(argv):
                raise ConfigError(f"flag --{body} needs a value")
            key, value = body, argv[i + 1]
            i += 2
        if key in ("config", "out", "checkpoint"):
            options[key] = value
        elif key == "warm-start":
            options["warm_start"] = value
        elif key == "seed":
            overrides["train.seed"] = value
        elif key == "threads":
            overrides["train.threads"] = value
        elif key in _ABLATION_SUGAR:
            overrides[_ABLATION_SUGAR[key]] = value
        elif key in REGISTRY:
            overrides[key] = value
        else:
            raise ConfigError(f"unknown flag --{key}")
    return command, options, overrides


def _load_split(cfg: ExperimentConfig) -> SplitDataset:
    if not cfg.data.path:
        raise ConfigError("data.path is required")
    try:
        ds = load_interactions(cfg.data.path)
    except FileNotFoundError as exc:
        raise DataError(f"data file not found: {cfg.data.path}") from exc
    return leave_one_out_split(ds)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _results_records(cfg, split, models, final_round) -> list[dict]:
    records = []
    for phase in ("validation", "test"):
        by_k = evaluate_cutoffs(split, models, cfg.eval.cutoffs, phase)
        for k in cfg.eval.cutoffs:
            res = by_k[k]
            records.append(
                {
                    "phase": phase,
                    "k": k,
                    "recall": res.recall,
                    "ndcg": res.ndcg,
                    "n_users": split.n_users,
                    "seed": cfg.train.seed,
                    "round": final_round,
                }
            )
    return records


def cmd_pretrain(cfg: ExperimentConfig, out: Path) -> int:
    split = _load_split(cfg)
    graph = assemble_pretraining_graph(
        split,
        privacy_settings(cfg),
        cfg.train.seed,
        use_true_edges=cfg.pretrain.use_true_graph,
    )
    table = init_table(
        split.n_users, split.n_items, cfg.model.dim, substream(cfg.train.seed, "init")
    )
    result = pretrain(
        graph,
        table,
        cfg.pretrain.epochs,
        augmentation_settings(cfg, split.n_users),
        pretrain_eta(cfg),
        cfg.model.layers,
        substream(cfg.train.seed, "pretrain"),
    )
    if not result.table.allfinite():
        raise NumericError("non-finite embeddings after pre-training")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.table, out / "pretrained.txt", pretrained=True)
    _write_json(
        out / "pretrain_summary.json",
        {
            "epochs": cfg.pretrain.epochs,
            "losses": list(result.losses),
            "seed": cfg.train.seed,
        },
    )
    print(f"pretrain: wrote {out / 'pretrained.txt'}")
    return 0


def _evaluation_models_from_checkpoint(
    cfg: ExperimentConfig, split: SplitDataset, table: EmbeddingTable
) -> dict[int, UserEvalModel]:
    """Bare-model protocol: checkpoint rows only, no personalization mix."""
    privacy = privacy_settings(cfg)
    models = {}
    for user in sorted(split.train):
        train_items = split.train[user]
        pseudo = sample_pseudo_items(
            split.n_items,
            train_items,
            privacy.pseudo_items_p,
            substream(cfg.train.seed, "eval-graph", user),
        )
        user_emb = infer_user_embedding(
            table.users[user],
            table.items,
            sorted(train_items | pseudo),
            cfg.model.layers,
        )
        models[user] = UserEvalModel(user_emb, table.items, train_items | pseudo)
    return models


def cmd_train(cfg: ExperimentConfig, out: Path, warm_start: str | None) -> int:
    split = _load_split(cfg)
    warm_table = None
    if warm_start and not cfg.ablation.no_pretrain:
        warm_table, _flags = load_checkpoint(warm_start)
        if warm_table.n_users != split.n_users or warm_table.n_items != split.n_items:
            raise DataError("warm-start checkpoint does not match the dataset shape")
        if warm_table.dim != cfg.model.dim:
            raise ConfigError(
                f"model.dim is {cfg.model.dim} but the warm-start checkpoint has dim "
                f"{warm_table.dim}"
            )
    if cfg.privacy.enabled and cfg.privacy.laplace_lambda > 0:
        eps = privacy_budget(
            LdpConfig(cfg.privacy.clip_delta, cfg.privacy.laplace_lambda)
        )
        print(f"privacy: per-upload budget bound {eps:.4f}")
    result = run_training(cfg, split, warm_table=warm_table, verbose=True)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint_table(), out / "checkpoint.txt")
    with open(out / "rounds.jsonl", "w", encoding="utf-8") as fh:
        for report in result.reports:
            fh.write(json.dumps(report.record(), sort_keys=True) + "\n")
    with open(out / "clusters.csv", "w", encoding="utf-8") as fh:
        fh.write("user_id,cluster_id\n")
        for user in range(split.n_users):
            fh.write(f"{user},{int(result.assignment.assignment[user])}\n")
    models = build_eval_models(
        split,
        result.states,
        result.cluster_items,
        result.assignment,
        result.global_items,
        result.local_base,
        eval_weights(cfg),
        cfg,
        threads=cfg.train.threads,
    )
    _write_json(
        out / "results.json", _results_records(cfg, split, models, result.final_round)
    )
    print(f"train: wrote {out / 'checkpoint.txt'} ({result.final_round} effective rounds)")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, out: Path, checkpoint: str | None) -> int:
    if not checkpoint:
        raise ConfigError("evaluate needs --checkpoint PATH")
    split = _load_split(cfg)
    table, _flags = load_checkpoint(checkpoint)
    if table.n_users != split.n_users or table.n_items != split.n_items:
        raise DataError("checkpoint does not match the dataset shape")
    models = _evaluation_models_from_checkpoint(cfg, split, table)
    records = _results_records(cfg, split, models, 0)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "results.json", records)
    for rec in records:
        print(
            f"{rec['phase']:>10} @ {rec['k']:<3d} recall {rec['recall']:.4f}  "
            f"ndcg {rec['ndcg']:.4f}"
        )
    return 0


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.ablation.no_pretrain or cfg.pretrain.epochs == 0:
        return cmd_train(cfg, out, warm_start=None)
    status = cmd_pretrain(cfg, out)
    if status:
        return status
    return cmd_train(cfg, out, warm_start=str(out / "pretrained.txt"))


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else list(argv)
    try:
        parsed = _parse_args(args)
        if parsed is None:
            return 0
        command, options, overrides = parsed
        file_overrides = (
            read_config_file(options["config"]) if options["config"] else {}
        )
        cfg = build_config(file_overrides, overrides)
        out = Path(options["out"])
        if command == "pretrain":
            return cmd_pretrain(cfg, out)
        if command == "train":
            return cmd_train(cfg, out, options["warm_start"])
        if command == "evaluate":
            return cmd_evaluate(cfg, out, options["checkpoint"])
        return cmd_simulate(cfg, out)
    except (ConfigError, DataError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
