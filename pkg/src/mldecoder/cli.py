"""Command-line entry point: ``train``, ``bench``, ``zsl-eval``, ``gradcheck``.

Exit codes: 0 success, 1 a check or run failed, 2 bad configuration or a
missing input file, 3 checkpoint incompatible with the configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import HEAD_KINDS, HeadCostModel, rows_to_csv, rows_to_markdown, run_scalability_sweep
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, default_config, load_config
from .errors import ConfigError, ContractError, TrainingDivergedError
from .gradcheck import gradient_suite, shift_null_check
from .heads import (GapHead, GroupAssignment, HeadConfig, MLDecoderHead, QuerySet,
                    TransformerDecoderHead)
from .tensor import Tensor
from .train import (SUMMARY_HEADER, AslConfig, LossConfig, Split, evaluate, evaluate_zsl,
                    generate_synthetic_dataset, load_dataset, save_dataset, train_model)
from .zsl import (AugmentationConfig, WordEmbeddingTable, ZslConfig, ZslMLDecoder,
                  inference_labels, load_word_embeddings)

ABLATION_PRESETS = ("none", "noise", "random-query", "both")


class IncompatibleCheckpoint(Exception):
    pass


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _input_hashes(cfg: RunConfig):
    hashes = {"config": git_blob_hash(cfg.canonical(include_output=False).encode())}
    paths = [("data", "cache"), ("data", "embeddings"), ("data", "split"),
             ("model", "assignment"), ("eval", "checkpoint")]
    for section, name in paths:
        p = cfg.path(section, name)
        if p is not None and p.is_file():
            hashes[f"{section}.{name}"] = git_blob_hash(p.read_bytes())
    return hashes


def _metadata(cfg: RunConfig, command, **extra):
    return {"command": command, "seed": cfg.require_seed(), "config_hash": cfg.digest(),
            "inputs": _input_hashes(cfg), **extra}


def _write(out: Path, name, text):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text, encoding="utf-8")


def _write_json(out: Path, name, obj):
    _write(out, name, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# building blocks


def load_data(cfg: RunConfig):
    spec = cfg.dataset_spec()
    cache = cfg.path("data", "cache")
    if cache is not None and cache.is_file():
        data = load_dataset(cache, expected=spec)
    else:
        data = generate_synthetic_dataset(spec)
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            save_dataset(data, cache)
    emb = cfg.path("data", "embeddings")
    if emb is not None:
        data.table = _table_from_file(emb, cfg.path("data", "split"), data.table)
    return data


def _table_from_file(emb, split, generated: WordEmbeddingTable):
    table = load_word_embeddings(emb, split)
    if set(table.labels) != set(generated.labels):
        raise ConfigError(f"{emb}: labels do not match the dataset's {len(generated.labels)} "
                          "class names")
    seen = generated.seen_mask if split is None else np.array(
        [table.seen_mask[table.index(lab)] for lab in generated.labels])
    if not np.array_equal(seen, generated.seen_mask):
        raise ConfigError(f"{split}: seen/unseen split differs from the training data")
    return WordEmbeddingTable(list(generated.labels), table.rows(generated.labels), seen)


def augmentation(cfg: RunConfig, preset=None) -> AugmentationConfig:
    a = cfg.section("aug")
    aug = AugmentationConfig.preset(preset or a["preset"], seed=cfg.require_seed())
    if preset is None:
        if a["random_query_count"] is not None:
            aug.random_query_count = a["random_query_count"]
        if a["noise_sigma"] is not None:
            aug.noise_sigma = a["noise_sigma"]
    return aug


def loss_config(cfg: RunConfig) -> LossConfig:
    t = cfg.section("train")
    return LossConfig(t["loss"], AslConfig(t["gamma_neg"], t["gamma_pos"], t["margin"]))


def _assignment(cfg: RunConfig):
    p = cfg.path("model", "assignment")
    return None if p is None else GroupAssignment.load(p)


def build_model(cfg: RunConfig, data):
    m, seed = cfg.section("model"), cfg.require_seed()
    spec = data.spec
    n = len(data.train.labels)
    if m["kind"] == "zsl":
        zcfg = ZslConfig(model_dim=m["model_dim"], word_dim=data.table.dim,
                         embed_dim=spec.embed_dim, num_heads=m["num_heads"],
                         ff_hidden_dim=m["ff_hidden_dim"], mode=m["zsl_mode"],
                         group_size=m["group_size"], head_type=m["zsl_head"],
                         residual=m["residual"], group_seed=m["group_seed"])
        return ZslMLDecoder(zcfg, data.table, seed=seed, assignment=_assignment(cfg))
    if m["kind"] == "gap":
        return GapHead(n, spec.embed_dim, seed=seed)
    assignment = _assignment(cfg)
    k = m["num_queries"]
    if assignment is not None and k is None:
        k = assignment.num_groups
    hcfg = HeadConfig(num_classes=n, model_dim=m["model_dim"], num_queries=k,
                      num_heads=m["num_heads"], ff_hidden_dim=m["ff_hidden_dim"],
                      embed_dim=spec.embed_dim, shared_group_fc=m["shared_group_fc"],
                      residual=m["residual"], token_pool=m["token_pool"],
                      group_seed=m["group_seed"], group_assignment=assignment)
    queries = None
    if m["query_kind"] == "word_embedding":
        if hcfg.num_queries != n or data.table.dim != hcfg.model_dim:
            raise ConfigError("[model] query_kind: word_embedding needs num_queries == classes "
                              "and word_dim == model_dim")
        queries = QuerySet(Tensor(data.table.rows(data.train.labels)), "word_embedding")
    if m["kind"] == "transformer":
        return TransformerDecoderHead(hcfg, query_kind=m["query_kind"], seed=seed,
                                      queries=queries)
    if m["kind"] == "mldecoder":
        return MLDecoderHead(hcfg, query_kind=m["query_kind"], seed=seed, queries=queries)
    raise ConfigError(f"[model] kind: unknown head {m['kind']!r}")


def assignment_digest(model, data):
    """Digest of the class-to-group assignment the model trains under."""
    if isinstance(model, ZslMLDecoder):
        labels = data.table.seen_labels
        if model.config.mode == "full":
            return GroupAssignment.identity(len(labels)).digest()
        return model.assignment_for(labels).digest()
    if isinstance(model, MLDecoderHead):
        return model.params.assignment.digest()
    if isinstance(model, TransformerDecoderHead):
        return GroupAssignment.identity(model.config.num_classes).digest()
    return None


def _train(cfg, data, aug):
    model = build_model(cfg, data)
    t = cfg.section("train")
    result = train_model(model, data.train, loss_config(cfg), aug, epochs=t["epochs"],
                         seed=cfg.require_seed(), lr=t["lr"], batch_size=t["batch_size"])
    return model, result


def _seen_split(data):
    labels = data.train.labels
    return Split(data.eval.tokens, data.eval.columns(labels), list(labels))


def _zsl_reports(model, data):
    overlap = set(inference_labels(data.table, "ZSL")) & set(data.train.labels)
    if overlap:
        raise ContractError(f"ZSL labels overlap training labels: {sorted(overlap)[:5]}")
    return evaluate_zsl(model, data.eval)


def _aug_flags(aug: AugmentationConfig):
    return {"random_query": aug.count_for(10) > 0, "query_noise": aug.noise_sigma > 0,
            "random_query_count": aug.random_query_count, "noise_sigma": aug.noise_sigma}


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, out: Path):
    data = load_data(cfg)
    aug = augmentation(cfg)
    model, result = _train(cfg, data, aug)
    digest = assignment_digest(model, data)
    meta = _metadata(cfg, "train", augmentation=_aug_flags(aug), kind=model.kind,
                     assignment_digest=digest, initial_loss=result.initial_loss,
                     final_loss=result.final_loss)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", model,
                    {"kind": model.kind, "assignment_digest": digest,
                     "config_hash": cfg.digest(), "augmentation": _aug_flags(aug)})
    _write(out, "loss_trace.csv", "epoch,loss\n" + "".join(
        f"{i},{v!r}\n" for i, v in enumerate(result.loss_trace)))
    seen = evaluate(model, _seen_split(data), mode="seen")
    _write(out, "metrics.csv", seen.to_csv())
    summary = [seen.summary_line()]
    if isinstance(model, ZslMLDecoder) and data.table.unseen_labels:
        reports = _zsl_reports(model, data)
        for mode, rep in reports.items():
            _write(out, f"metrics_{mode.lower()}.csv", rep.to_csv())
            summary.append(rep.summary_line())
    _write(out, "summary.csv", SUMMARY_HEADER + "\n" + "\n".join(summary) + "\n")
    _write_json(out, "metadata.json", meta)
    print(SUMMARY_HEADER)
    print("\n".join(summary))
    return 0


def cmd_zsl_eval(cfg: RunConfig, out: Path, ablate=False):
    ckpt = cfg.path("eval", "checkpoint")
    if ckpt is None:
        raise ConfigError("[eval] checkpoint: required for zsl-eval (or pass --checkpoint)")
    if cfg["model", "kind"] != "zsl":
        raise ConfigError("[model] kind: zsl-eval needs kind = zsl")
    data = load_data(cfg)
    if not data.table.unseen_labels:
        raise ConfigError("[data] num_unseen: zsl-eval needs unseen classes")
    model = build_model(cfg, data)
    state, ck_meta = load_checkpoint(ckpt)
    expected = assignment_digest(model, data)
    if ck_meta.get("kind") != "zsl":
        raise IncompatibleCheckpoint(f"{ckpt}: checkpoint holds a {ck_meta.get('kind')!r} head")
    if ck_meta.get("assignment_digest") != expected:
        raise IncompatibleCheckpoint(
            f"{ckpt}: trained under group assignment {ck_meta.get('assignment_digest')}, but "
            f"this configuration yields {expected}; evaluate with the same assignment file "
            "and group settings used for training")
    model.load_state_dict(state)
    reports = _zsl_reports(model, data)
    summary = [rep.summary_line() for rep in reports.values()]
    for mode, rep in reports.items():
        _write(out, f"metrics_{mode.lower()}.csv", rep.to_csv())
    _write(out, "summary.csv", SUMMARY_HEADER + "\n" + "\n".join(summary) + "\n")
    meta = _metadata(cfg, "zsl-eval", augmentation=ck_meta.get("augmentation"),
                     assignment_digest=expected)
    print(SUMMARY_HEADER)
    print("\n".join(summary))
    if ablate:
        rows = ablation(cfg, data)
        header = "augmentation,random_query,query_noise,ZSL_mAP,GZSL_mAP,seen_mAP"
        _write(out, "ablation.csv", header + "\n" + "".join(
            f"{r['augmentation']},{int(r['random_query'])},{int(r['query_noise'])},"
            f"{r['ZSL']!r},{r['GZSL']!r},{r['seen']!r}\n" for r in rows))
        _write(out, "ablation.md", ablation_markdown(rows))
        meta["ablation"] = rows
        print(ablation_markdown(rows), end="")
    _write_json(out, "metadata.json", meta)
    return 0


def ablation(cfg: RunConfig, data):
    """Retrain the configured head once per augmentation preset and score each."""
    rows = []
    for preset in ABLATION_PRESETS:
        aug = augmentation(cfg, preset)
        model, _ = _train(cfg, data, aug)
        reports = _zsl_reports(model, data)
        flags = _aug_flags(aug)
        rows.append({"augmentation": preset, "random_query": flags["random_query"],
                     "query_noise": flags["query_noise"], "ZSL": reports["ZSL"].mAP,
                     "GZSL": reports["GZSL"].mAP,
                     "seen": evaluate(model, _seen_split(data)).mAP})
    return rows


def ablation_markdown(rows):
    tick = lambda b: "✓" if b else ""  # noqa: E731
    lines = ["| Random-query | Query-noise | ZSL mAP | GZSL mAP | Seen mAP |",
             "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {tick(r['random_query'])} | {tick(r['query_noise'])} | "
                     f"{100 * r['ZSL']:.1f} | {100 * r['GZSL']:.1f} | {100 * r['seen']:.1f} |")
    return "\n".join(lines) + "\n"


def bench_configs(cfg: RunConfig):
    b = cfg.section("bench")
    configs = []
    for kind in b["heads"]:
        if kind not in HEAD_KINDS:
            raise ConfigError(f"[bench] heads: unknown head {kind!r}")
        for n in b["sizes"]:
            k = {"gap": None, "transformer": n, "mldecoder": min(b["num_queries"], n)}[kind]
            configs.append(HeadCostModel(kind, n, k, D=b["model_dim"], h=b["num_heads"],
                                         H=b["height"], W=b["width"]))
    return configs


def cmd_bench(cfg: RunConfig, out: Path, analytic_only=False):
    b = cfg.section("bench")
    rows = run_scalability_sweep(bench_configs(cfg), repeats=b["repeats"],
                                 budget_s=b["budget_s"], batch=b["batch"],
                                 analytic_only=analytic_only, seed=cfg.require_seed())
    mismatched = [r for r in rows if r.instrumented_macs not in (None, r.analytic_macs)]
    _write(out, "bench.csv", rows_to_csv(rows))
    _write(out, "bench.md", rows_to_markdown(rows))
    _write_json(out, "metadata.json", _metadata(cfg, "bench", analytic_only=analytic_only))
    print(rows_to_markdown(rows), end="")
    for r in mismatched:
        print(f"analytic/instrumented MAC mismatch for {r.head} N={r.N}: "
              f"{r.analytic_macs} vs {r.instrumented_macs}", file=sys.stderr)
    return 1 if mismatched else 0


def cmd_gradcheck(seeds=10):
    failed = 0
    for res in gradient_suite(range(seeds)):
        print(res.line())
        failed += not res.passed
    for seed in range(seeds):
        ok, analytic, numeric = shift_null_check(seed)
        print(f"{'PASS' if ok else 'FAIL'} zsl_full+ce:ff_norm.bias(shift-null) seed={seed} "
              f"max_abs_grad={max(analytic, numeric):.3e}")
        failed += not ok
    print(f"{failed} failing checks")
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mldecoder", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required):
        p.add_argument("--config", required=config_required, metavar="PATH")
        p.add_argument("--seed", type=int, metavar="U64")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config field")

    common(sub.add_parser("train", help="train a head on the synthetic task"), True)
    p = sub.add_parser("bench", help="head cost and timing sweep")
    common(p, False)
    p.add_argument("--analytic-only", action="store_true", help="skip timing")
    p = sub.add_parser("zsl-eval", help="ZSL and GZSL evaluation of a checkpoint")
    common(p, True)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--ablate", action="store_true",
                   help="also retrain under each augmentation setting (4 rows)")
    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=10)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not (sep and dot):
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set(section.strip(), name.strip(), value.strip())
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.values["run"]["seed"] = args.seed
    if args.out is not None:
        cfg.values["output"]["dir"] = args.out
    if getattr(args, "checkpoint", None):
        cfg.values["eval"]["checkpoint"] = str(Path(args.checkpoint).resolve())
    cfg.require_seed()
    cfg.check_inputs()
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seeds)
        cfg = _resolve_config(args)
        out = cfg.path("output", "dir") if args.out is None else Path(args.out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "bench":
            return cmd_bench(cfg, out, args.analytic_only)
        return cmd_zsl_eval(cfg, out, args.ablate)
    except IncompatibleCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
