"""Command-line interface for the full pipeline.

Exit codes: 0 success, 1 check failure, 2 input error.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from . import decomp as decomp_mod
from . import inference as infer_mod
from . import metrics as metrics_mod
from . import supervision as sup_mod
from . import toytrain as toy_mod
from .config import AppConfig, ConfigError, load_config
from .head import gradcheck
from .losses import LossWeights, MalConfig
from .supervision import SamplerConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2


def _input_error(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_INPUT_ERROR)


def _load_samples(path: str, strict: bool) -> data_mod.LoadResult:
    try:
        return data_mod.load_jsonl(path, strict=strict)
    except FileNotFoundError:
        _input_error(f"no such file: {path}")
    except data_mod.JsonlError as exc:
        _input_error(f"{path}: {exc}")
    raise AssertionError("unreachable")


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON config file.")
@click.option("--lenient-config", is_flag=True, default=False,
              help="Ignore unknown config keys instead of rejecting them.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, lenient_config: bool) -> None:
    """Unified open-text aerial detection tooling."""
    try:
        cfg = load_config(config_path, strict=not lenient_config)
    except (ConfigError, FileNotFoundError) as exc:
        _input_error(str(exc))
        return
    logging.basicConfig(level=getattr(logging, cfg.log_level.upper(), logging.INFO))
    ctx.obj = cfg


@main.command()
@click.argument("input_path", type=click.Path())
@click.argument("output_path", type=click.Path())
@click.option("--naive", is_flag=True, default=False,
              help="One sample per triplet instead of per-image merging.")
@click.option("--strict/--lenient", "strict", default=True,
              help="Abort on malformed lines vs skip and count them.")
def aggregate(input_path: str, output_path: str, naive: bool, strict: bool) -> None:
    """Reformulate grounding triplets into aggregated samples JSONL."""
    try:
        loaded = data_mod.load_triplets_jsonl(input_path, strict=strict)
    except FileNotFoundError:
        _input_error(f"no such file: {input_path}")
        return
    except data_mod.JsonlError as exc:
        _input_error(f"{input_path}: {exc}")
        return
    triplets = loaded.samples
    if naive:
        samples = [data_mod.naive_reformulate(t) for t in triplets]
    else:
        samples = data_mod.aggregate_image_level(triplets)
    data_mod.save_jsonl(samples, output_path)
    click.echo(
        f"wrote {len(samples)} samples from {len(triplets)} triplets"
        + (f" (skipped {len(loaded.skipped)} bad lines)" if loaded.skipped else "")
    )


@main.command()
@click.argument("input_path", type=click.Path())
@click.argument("output_path", type=click.Path())
@click.option("--mock", is_flag=True, default=False, help="Use the offline mock client.")
@click.option("--endpoint", default=None, help="Chat-completions endpoint URL.")
@click.option("--model", default=None, help="Model name for the endpoint.")
@click.option("--seed", type=int, default=0)
@click.option("--retries", type=int, default=2)
@click.option("--concurrency", type=int, default=4)
@click.option("--a-max", type=int, default=None, help="Attribute cap per query.")
@click.option("--resume", is_flag=True, default=False,
              help="Skip queries that already carry attributes.")
@click.option("--transcripts", type=click.Path(), default=None,
              help="Write per-caption transcripts JSONL here.")
@click.option("--rejects", type=click.Path(), default=None,
              help="Write rejected captions here.")
@click.pass_obj
def decompose(cfg: AppConfig, input_path: str, output_path: str, mock: bool,
              endpoint: str | None, model: str | None, seed: int, retries: int,
              concurrency: int, a_max: int | None, resume: bool,
              transcripts: str | None, rejects: str | None) -> None:
    """Enrich expression queries with decomposed attributes."""
    loaded = _load_samples(input_path, strict=True)
    a_max = a_max if a_max is not None else cfg.sampler.a_max

    if mock:
        client: decomp_mod.ChatClient = decomp_mod.MockChatClient(seed)
    else:
        endpoint = endpoint or cfg.llm.endpoint
        model = model or cfg.llm.model
        if not endpoint or not model:
            _input_error("remote decomposition needs --endpoint and --model "
                         "(or config/env values); or pass --mock")
            return
        client = decomp_mod.HttpChatClient(endpoint, model, cfg.llm.api_key,
                                           timeout=cfg.llm.timeout)

    captions: dict[str, str] = {}
    slots: dict[str, tuple[int, int]] = {}
    for si, sample in enumerate(loaded.samples):
        for qi, query in enumerate(sample.queries):
            if query.kind != data_mod.KIND_EXPRESSION:
                continue
            if resume and query.attributes:
                continue
            key = f"{sample.image_id}#{qi}"
            captions[key] = query.text
            slots[key] = (si, qi)

    results = decomp_mod.decompose_many(
        client, captions, retries=retries, seed=seed, a_max=a_max,
        concurrency=concurrency,
    )

    rejected: list[str] = []
    transcript_rows: list[dict] = []
    samples = list(loaded.samples)
    for key, (result, report) in results.items():
        si, qi = slots[key]
        transcript_rows.append({
            "caption_id": key,
            "caption": captions[key],
            "verdict": report.verdict,
            "attempt_count": report.attempt_count,
            "transcript": report.transcript,
        })
        if not report.accepted or result is None:
            rejected.append(key)
            continue
        trimmed = decomp_mod.truncate_attributes(result, a_max)
        sample = samples[si]
        queries = list(sample.queries)
        queries[qi] = queries[qi].with_attributes(trimmed.attributes)
        samples[si] = dataclasses.replace(sample, queries=tuple(queries))

    data_mod.save_jsonl(samples, output_path)
    if transcripts:
        with open(transcripts, "w", encoding="utf-8") as fp:
            for row in transcript_rows:
                fp.write(json.dumps(row, ensure_ascii=False) + "\n")
    if rejects:
        with open(rejects, "w", encoding="utf-8") as fp:
            for key in sorted(rejected):
                fp.write(json.dumps({"caption_id": key, "caption": captions[key]}) + "\n")
    click.echo(f"decomposed {len(results) - len(rejected)}/{len(results)} captions"
               f" ({len(rejected)} rejected)")


@main.command("validate-attrs")
@click.argument("input_path", type=click.Path())
@click.option("--a-max", type=int, default=10)
def validate_attrs(input_path: str, a_max: int) -> None:
    """Re-check enriched samples against the verbatim extraction rules."""
    loaded = _load_samples(input_path, strict=True)
    rejects = 0
    checked = 0
    for sample in loaded.samples:
        for qi, query in enumerate(sample.queries):
            if query.kind != data_mod.KIND_EXPRESSION or not query.attributes:
                continue
            checked += 1
            result = decomp_mod.DecompositionResult(
                primary_target=query.text, attributes=tuple(query.attributes)
            )
            report = decomp_mod.validate(query.text, result, a_max=a_max)
            if not report.accepted:
                rejects += 1
                for v in report.violations:
                    if v.hard:
                        click.echo(f"{sample.image_id}#{qi}: {v.rule_id}: {v.message}")
    click.echo(f"checked {checked} enriched queries, {rejects} rejected")
    if rejects:
        sys.exit(EXIT_CHECK_FAILED)


@main.command("build-supervision")
@click.argument("input_path", type=click.Path())
@click.argument("out_dir", type=click.Path())
@click.option("--task", type=click.Choice(["ovad", "rsvg"]), default="rsvg")
@click.option("--vocabulary", type=click.Path(), default=None,
              help="JSON list of category names (ovad only).")
@click.option("--seed", type=int, default=None)
@click.option("--q-max", type=int, default=None)
@click.option("--a-max", type=int, default=None)
@click.option("--iterations", type=int, default=1)
@click.pass_obj
def build_supervision(cfg: AppConfig, input_path: str, out_dir: str, task: str,
                      vocabulary: str | None, seed: int | None, q_max: int | None,
                      a_max: int | None, iterations: int) -> None:
    """Draw text batches and dump matrices plus JSON debug artifacts."""
    loaded = _load_samples(input_path, strict=True)
    sampler = SamplerConfig(
        q_max=q_max if q_max is not None else cfg.sampler.q_max,
        a_max=a_max if a_max is not None else cfg.sampler.a_max,
        seed=seed if seed is not None else cfg.sampler.seed,
        shuffle=cfg.sampler.shuffle,
    )
    vocab: list[str] = []
    if task == "ovad":
        if not vocabulary:
            _input_error("ovad supervision needs --vocabulary")
            return
        try:
            with open(vocabulary, "r", encoding="utf-8") as fp:
                vocab = json.load(fp)
        except FileNotFoundError:
            _input_error(f"no such file: {vocabulary}")
            return

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    skipped = 0
    written = 0
    for sample in loaded.samples:
        if not sample.usable:
            skipped += 1
            continue
        for it in range(iterations):
            rng = decomp_mod.derive_rng(sampler.seed, "cli-batch", sample.image_id, it)
            if task == "ovad":
                tb, cs = sup_mod.sample_ovad(sample, vocab, sampler, rng)
            else:
                tb, cs = sup_mod.sample_rsvg(sample, sampler, rng)
            problems = sup_mod.verify_consistency(cs, tb)
            if problems:
                click.echo(f"{sample.image_id} iteration {it}: {problems}", err=True)
                sys.exit(EXIT_CHECK_FAILED)
            stem = out / f"{sample.image_id}_{it:03d}"
            sup_mod.dump_batch_debug(stem.with_suffix(".json"), tb, cs)
            sup_mod.save_matrix(stem.with_suffix(".mq"), cs.m_q)
            sup_mod.save_matrix(stem.with_suffix(".ma"), cs.m_a)
            sup_mod.save_matrix(stem.with_suffix(".mmap"), cs.m_map)
            written += 1
    click.echo(f"wrote {written} batches to {out} (skipped {skipped} unusable samples)")


@main.command("gradcheck")
@click.option("--trials", type=int, default=64)
@click.option("--seed", type=int, default=0)
@click.option("--inject-fault", is_flag=True, default=False,
              help="Corrupt one analytic gradient to prove detection.")
@click.option("--json-out", type=click.Path(), default=None)
def gradcheck_cmd(trials: int, seed: int, inject_fault: bool, json_out: str | None) -> None:
    """Verify analytic gradients against central finite differences."""
    report = gradcheck(seed=seed, trials=trials, inject_fault=inject_fault)
    for group, err in sorted(report.max_rel.items()):
        click.echo(f"{group:10s} max rel err {err:.3e}")
    click.echo(f"{'PASS' if report.passed else 'FAIL'} "
               f"(threshold {report.threshold:g}, {report.trials} trials)")
    if json_out:
        with open(json_out, "w", encoding="utf-8") as fp:
            json.dump(report.to_dict(), fp, indent=2)
    if not report.passed:
        sys.exit(EXIT_CHECK_FAILED)


@main.command("train-toy")
@click.option("--steps", type=int, default=500)
@click.option("--lr", type=float, default=0.1)
@click.option("--seed", type=int, default=0)
@click.option("--images", type=int, default=4)
@click.option("--queries", type=int, default=3)
@click.option("--attrs", type=int, default=3)
@click.option("--attr-weight", type=float, default=None,
              help="Override the attribute-loss weight (0 disables dense alignment).")
@click.option("--history", "history_path", type=click.Path(), default=None)
@click.option("--recovery", "recovery_path", type=click.Path(), default=None)
@click.pass_obj
def train_toy(cfg: AppConfig, steps: int, lr: float, seed: int, images: int,
              queries: int, attrs: int, attr_weight: float | None,
              history_path: str | None, recovery_path: str | None) -> None:
    """Train on a planted world and report supervision recovery."""
    weights = cfg.weights
    if attr_weight is not None:
        weights = dataclasses.replace(weights, attr=attr_weight)
    world = toy_mod.generate_world(toy_mod.WorldConfig(
        seed=seed,
        sizes=toy_mod.WorldSizes(n_images=images, queries_per_image=queries,
                                 attrs_per_query=attrs,
                                 d_vis=cfg.head.d_vis, d_txt=cfg.head.d_txt),
    ))
    train_cfg = toy_mod.TrainConfig(
        steps=steps, lr=lr, weights=weights, mal=cfg.mal,
        sampler=cfg.sampler, seed=seed, share_head_scales=cfg.head.share_scales,
    )
    start = time.perf_counter()
    state = toy_mod.train(world, train_cfg)
    elapsed = time.perf_counter() - start
    report = toy_mod.evaluate_recovery(world, state, train_cfg.sampler)
    if state.history:
        first, last = state.history[0].total, state.history[-1].total
        click.echo(f"loss {first:.4f} -> {last:.4f} over {steps} steps ({elapsed:.1f}s)")
    click.echo(f"query agreement {report.query_agreement:.3f}, "
               f"attr agreement {report.attr_agreement:.3f}")
    if history_path:
        toy_mod.write_history_csv(state.history, history_path)
    if recovery_path:
        toy_mod.write_recovery_json(report, recovery_path)


@main.command("eval")
@click.argument("predictions_path", type=click.Path())
@click.argument("gt_path", type=click.Path())
@click.option("--tau", "taus", type=float, multiple=True, default=(0.5, 0.6, 0.7))
@click.option("--json-out", type=click.Path(), default=None)
@click.option("--per-expression", type=click.Path(), default=None,
              help="CSV of per-expression verdicts.")
def eval_cmd(predictions_path: str, gt_path: str, taus: tuple[float, ...],
             json_out: str | None, per_expression: str | None) -> None:
    """Score predictions JSONL against ground-truth samples JSONL."""
    try:
        preds = infer_mod.read_predictions_jsonl(predictions_path)
    except FileNotFoundError:
        _input_error(f"no such file: {predictions_path}")
        return
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        _input_error(f"{predictions_path}: {exc}")
        return
    loaded = _load_samples(gt_path, strict=True)

    outcomes: list[metrics_mod.ExpressionOutcome] = []
    verdict_rows: list[tuple[str, int, int, float]] = []
    det_records: list[metrics_mod.DetectionRecord] = []
    gt_records: list[metrics_mod.GroundTruthRecord] = []

    for sample in loaded.samples:
        dets = preds.get(sample.image_id, [])
        for qi, query in enumerate(sample.queries):
            gt_boxes = tuple(g.box for g in sample.ground_truth if g.query_index == qi)
            if query.kind == data_mod.KIND_CATEGORY:
                for b in gt_boxes:
                    gt_records.append(metrics_mod.GroundTruthRecord(
                        image_id=sample.image_id, category=query.text, box=b))
                for d in dets:
                    if d.query_index == qi:
                        det_records.append(metrics_mod.DetectionRecord(
                            image_id=sample.image_id, category=query.text,
                            score=d.query_score, box=d.box))
                continue
            best = None
            for d in dets:
                if d.query_index == qi and (best is None or d.query_score > best.query_score):
                    best = d
            outcome = metrics_mod.ExpressionOutcome(
                pred_box=best.box if best else None,
                gt_boxes=gt_boxes,
                attr_scores=tuple(s for _, s in best.attr_labels) if best else (),
            )
            outcomes.append(outcome)
            best_iou = 0.0
            if best is not None and gt_boxes:
                best_iou = max(metrics_mod.iou(best.box, g) for g in gt_boxes)
            verdict_rows.append((sample.image_id, qi, int(best_iou >= 0.5), best_iou))

    report = metrics_mod.build_report(outcomes, det_records, gt_records, taus=taus)
    click.echo(metrics_mod.format_table(report))
    if json_out:
        with open(json_out, "w", encoding="utf-8") as fp:
            json.dump(report.to_dict(), fp, indent=2)
    if per_expression:
        with open(per_expression, "w", encoding="utf-8") as fp:
            fp.write("image_id,query_index,localized,best_iou\n")
            for image_id, qi, ok, best_iou in verdict_rows:
                fp.write(f"{image_id},{qi},{ok},{best_iou:.6f}\n")


@main.command("report")
@click.argument("report_path", type=click.Path())
def report_cmd(report_path: str) -> None:
    """Render a saved metric report as an aligned text table."""
    try:
        with open(report_path, "r", encoding="utf-8") as fp:
            payload = json.load(fp)
    except FileNotFoundError:
        _input_error(f"no such file: {report_path}")
        return
    except json.JSONDecodeError as exc:
        _input_error(f"{report_path}: {exc}")
        return
    click.echo(metrics_mod.format_table(metrics_mod.MetricReport.from_dict(payload)))


if __name__ == "__main__":
    main()
