"""Operator command line: validate, split, mine, train, eval, rerank, augment, synth.

Exit codes: 0 success, 1 validation violations, 2 missing/unusable inputs,
3 training divergence, 4 checkpoint/manifest mismatch, 5 mining request too
large. All randomness flows from --seed; outputs are written atomically.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import evaluation, gateway, mining, model as M, store, synth, training
from .errors import DivergenceError, MiningError, TrifuseError

EXIT_VIOLATIONS = 1
EXIT_MISSING = 2
EXIT_DIVERGENCE = 3
EXIT_MISMATCH = 4
EXIT_MINE_TOO_LARGE = 5


def _load_bundle_or_exit(manifest: str) -> store.DatasetBundle:
    try:
        return store.load_bundle(manifest)
    except (FileNotFoundError, TrifuseError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISSING)


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


@click.group()
@click.option("--threads", type=int, default=0, help="Cap internal worker threads (0 = library default).")
@click.pass_context
def main(ctx, threads):
    """Fact-checked-claim retrieval engine with tri-source similarity fusion."""
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads


@main.command()
@click.option("--manifest", required=True, type=click.Path())
def validate(manifest):
    """Check every dataset invariant; one violation per line."""
    bundle = _load_bundle_or_exit(manifest)
    report = store.validate_bundle(bundle)
    for violation in report.violations:
        click.echo(violation)
    sys.exit(0 if report.ok else EXIT_VIOLATIONS)


@main.command()
@click.option("--manifest", required=True, type=click.Path())
@click.option("--dev-fraction", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def split(manifest, dev_fraction, seed, out):
    """Write a deterministic train/dev split for the manifest's posts."""
    if not (0.0 < dev_fraction < 1.0):
        raise click.UsageError("--dev-fraction must be in (0, 1)")
    bundle = _load_bundle_or_exit(manifest)
    result = store.split_dataset(bundle.pairs, dev_fraction, seed)
    _atomic_write(out, json.dumps(result, sort_keys=True))
    n_dev = sum(1 for v in result.values() if v == "dev")
    click.echo(f"wrote split: {len(result) - n_dev} train / {n_dev} dev posts")


@main.command()
@click.option("--manifest", required=True, type=click.Path())
@click.option("--m", "m_count", type=int, default=5, show_default=True)
@click.option("--source", type=click.Choice(["native", "english"]), default="english", show_default=True)
@click.option("--include-dev", is_flag=True, help="Also mine negatives for dev posts.")
@click.option("--out", required=True, type=click.Path())
def mine(manifest, m_count, source, include_dev, out):
    """Mine hard negatives from the configured embedding source."""
    bundle = _load_bundle_or_exit(manifest)
    post_m = store.l2_normalize_rows(bundle.matrices()[f"post_{source}"])
    fact_m = store.l2_normalize_rows(bundle.matrices()[f"fact_{source}"])
    post_ids = bundle.post_ids() if include_dev else bundle.split_post_ids("train")
    try:
        negatives = mining.mine_hard_negatives(post_m, fact_m, bundle.pairs, m_count, post_ids=post_ids)
    except MiningError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MINE_TOO_LARGE)
    mining.save_negatives(negatives, out)
    click.echo(f"mined {m_count} negatives for {len(negatives)} posts")


@main.command()
@click.option("--manifest", required=True, type=click.Path())
@click.option("--checkpoint-out", "checkpoint_out", required=True, type=click.Path())
@click.option("--log-out", type=click.Path(), default=None)
@click.option("--hidden", type=int, default=256, show_default=True)
@click.option("--dropout", type=float, default=0.2, show_default=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--batch-size", type=int, default=10000, show_default=True)
@click.option("--lr", type=float, default=6e-4, show_default=True)
@click.option("--weight-decay", type=float, default=0.01, show_default=True)
@click.option("--patience", type=int, default=5, show_default=True)
@click.option("--monitor", default="recall@10", show_default=True)
@click.option("--monitor-mode", type=click.Choice(["monolingual", "crosslingual"]), default="monolingual", show_default=True)
@click.option("--margin-weight", type=float, default=0.0, show_default=True)
@click.option("--margin", type=float, default=0.2, show_default=True)
@click.option("--negatives", type=click.Path(exists=True), default=None, help="Mined hard negatives (JSON Lines).")
@click.option("--seed", type=int, default=0, show_default=True)
def train(manifest, checkpoint_out, log_out, hidden, dropout, epochs, batch_size, lr,
          weight_decay, patience, monitor, monitor_mode, margin_weight, margin, negatives, seed):
    """Train from random init with early stopping; writes the best checkpoint."""
    if patience < 1:
        raise click.UsageError("--patience must be >= 1")
    if epochs < 1:
        raise click.UsageError("--epochs must be >= 1")
    bundle = _load_bundle_or_exit(manifest)
    report = store.validate_bundle(bundle)
    if not report.ok:
        for violation in report.violations:
            click.echo(violation, err=True)
        sys.exit(EXIT_VIOLATIONS)
    config = training.TrainConfig(
        batch_size=batch_size,
        learning_rate=lr,
        weight_decay=weight_decay,
        max_epochs=epochs,
        early_stopping_patience=patience,
        monitor=monitor,
        monitor_mode=monitor_mode,
        seed=seed,
        margin=margin,
        margin_weight=margin_weight,
    )
    model = M.init_model(
        d_native=bundle.post_native.dim,
        d_english=bundle.post_english.dim,
        hidden=hidden,
        dropout_p=dropout,
        seed=seed,
    )
    hard = mining.load_negatives(negatives) if negatives else None
    try:
        result = training.train(model, bundle, config, hard_negatives=hard, log_path=log_out)
    except DivergenceError as exc:
        last = "n/a"
        click.echo(f"error: training diverged ({exc}); last finite loss: {last}", err=True)
        sys.exit(EXIT_DIVERGENCE)
    M.save_checkpoint(result.best_model, checkpoint_out)
    click.echo(
        f"best {config.monitor_mode}/{config.monitor} = {result.best_monitor:.4f} "
        f"at epoch {result.best_epoch} ({len(result.log)} epochs run)"
    )


def _load_texts(texts_path) -> dict[str, str]:
    if not texts_path:
        return {}
    with open(texts_path, encoding="utf-8") as fh:
        return json.load(fh)


def _mock_rerank_transport() -> gateway.MockTransport:
    """Identity mock: echoes the first 10 candidate ids."""

    def handler(request):
        payload = json.loads(request.user_payload)
        ids = [c["fact_id"] for c in payload["factChecks"][: gateway.RERANK_OUTPUT_SIZE]]
        return json.dumps({payload["post"]["post_id"]: ids})

    return gateway.MockTransport(handler=handler)


def _rerank_run(run, transport, texts):
    outputs = []
    for pid, entries in run.ranked.items():
        if len(entries) < gateway.RERANK_POOL_SIZE:
            continue
        candidates = [(fid, texts.get(fid, "")) for fid, _ in entries[: gateway.RERANK_POOL_SIZE]]
        rr_input = gateway.RerankInput(post_id=pid, post_content=texts.get(pid, ""), candidates=candidates)
        outputs.append(gateway.rerank(rr_input, transport))
    return gateway.apply_rerank(run, outputs)


@main.command("eval")
@click.option("--manifest", required=True, type=click.Path())
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["mono", "cross"]), default="mono", show_default=True)
@click.option("--split", "split_name", type=click.Choice(["dev", "train", "all"]), default="dev", show_default=True)
@click.option("--rerank", "rerank_mode", type=click.Choice(["off", "mock", "http"]), default="off", show_default=True)
@click.option("--texts", type=click.Path(exists=True), default=None, help="JSON id -> content map for reranking.")
@click.option("--run-out", type=click.Path(), default=None)
@click.option("--report-out", type=click.Path(), default=None)
@click.option("--csv-out", type=click.Path(), default=None)
def eval_cmd(manifest, checkpoint, mode, split_name, rerank_mode, texts, run_out, report_out, csv_out):
    """Evaluate a checkpoint; prints the K in {1, 10, 20} metric grid."""
    bundle = _load_bundle_or_exit(manifest)
    try:
        model = M.load_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISSING)
    if not M.checkpoint_matches_bundle(model, bundle):
        click.echo(
            f"error: checkpoint dimensions (native {model.post_native_enc.d_in}, "
            f"english {model.post_english_enc.d_in}) do not match the manifest "
            f"(native {bundle.post_native.dim}, english {bundle.post_english.dim})",
            err=True,
        )
        sys.exit(EXIT_MISMATCH)
    full_mode = "monolingual" if mode == "mono" else "crosslingual"
    run, report = evaluation.evaluate(model, bundle, full_mode, k_max=20, split=split_name)
    if rerank_mode != "off":
        transport = _mock_rerank_transport() if rerank_mode == "mock" else gateway.HttpTransport()
        run = _rerank_run(run, transport, _load_texts(texts))
        report = evaluation.compute_metrics(run, bundle.pairs)
    for k in (1, 10, 20):
        cell = report.get(full_mode, "ALL", k)
        click.echo(f"{full_mode} K={k:>2}  S@K={cell['success']:.4f}  R@K={cell['recall']:.4f}  (n={cell['query_count']})")
    if run_out:
        run.save(run_out)
    if report_out:
        report.save(report_out)
    if csv_out:
        report.save_csv(csv_out)


@main.command("rerank")
@click.option("--run", "run_path", required=True, type=click.Path(exists=True))
@click.option("--texts", type=click.Path(exists=True), default=None)
@click.option("--transport", "transport_name", type=click.Choice(["mock", "http"]), default="mock", show_default=True)
@click.option("--out", required=True, type=click.Path())
def rerank_cmd(run_path, texts, transport_name, out):
    """Rerank a saved run file through the gateway."""
    ranked = {}
    with open(run_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                # run files carry order only; synthesize descending rank scores
                ranked[obj["post_id"]] = [
                    (fid, float(len(obj["ranked"]) - i)) for i, fid in enumerate(obj["ranked"])
                ]
    run = evaluation.RetrievalRun(mode="crosslingual", k_max=max(len(v) for v in ranked.values()), ranked=ranked)
    transport = _mock_rerank_transport() if transport_name == "mock" else gateway.HttpTransport()
    new_run = _rerank_run(run, transport, _load_texts(texts))
    new_run.save(out)
    click.echo(f"reranked {len(new_run.ranked)} posts")


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True),
              help="JSON Lines with {id, text, ocr} objects.")
@click.option("--transport", "transport_name", type=click.Choice(["mock", "http"]), default="mock", show_default=True)
@click.option("--out", required=True, type=click.Path())
def augment(input_path, transport_name, out):
    """Merge post text and OCR text into enhanced posts via the gateway."""
    records = []
    with open(input_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    if transport_name == "mock":
        def handler(request):
            payload = json.loads(request.user_payload)
            return json.dumps([
                " ".join(part for part in (p["text"], p["ocr"]) if part) for p in payload["pairs"]
            ])

        transport = gateway.MockTransport(handler=handler)
    else:
        transport = gateway.HttpTransport()
    lines = []
    n_rejected = 0
    for start in range(0, len(records), gateway.AUGMENT_BATCH_SIZE):
        chunk = records[start : start + gateway.AUGMENT_BATCH_SIZE]
        merged, rejected = gateway.augment_posts(
            [(r.get("text", ""), r.get("ocr", "")) for r in chunk], transport
        )
        n_rejected += len(rejected)
        for record, text in zip(chunk, merged):
            lines.append(json.dumps({"id": record.get("id"), "text": text}, ensure_ascii=False))
    _atomic_write(out, "\n".join(lines) + "\n")
    click.echo(f"augmented {len(records)} posts ({n_rejected} fell back to concatenation)")


@main.command("synth")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--posts", type=int, default=500, show_default=True)
@click.option("--facts", type=int, default=2000, show_default=True)
@click.option("--dim", type=int, default=64, show_default=True)
@click.option("--langs", type=int, default=4, show_default=True)
@click.option("--dev-fraction", type=float, default=0.2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def synth_cmd(out_dir, posts, facts, dim, langs, dev_fraction, seed):
    """Generate a synthetic dataset with planted matches (for demos and tests)."""
    bundle = synth.generate_bundle(
        n_posts=posts, n_facts=facts, dim=dim, n_langs=langs, dev_fraction=dev_fraction, seed=seed
    )
    manifest = synth.write_bundle(bundle, out_dir)
    click.echo(f"wrote {manifest}")


if __name__ == "__main__":
    main()
