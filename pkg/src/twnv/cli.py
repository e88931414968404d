"""Command-line entry point: run, report, prep, nvs-eval, validate-manifest.

Exit codes: 0 success, 1 partial failure, 2 configuration or usage error.
"""

from __future__ import annotations

import json
import logging
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

import click

from twnv.backends import ROLES, BackendConfig, BackendError, CallLedger, ImageRef, open_backend
from twnv.benchmark import (
    CATEGORIES,
    SchemaError,
    aggregate,
    compare,
    load_manifest,
    manifest_id,
)
from twnv.dataprep import MIN_MATCHES, MIN_VALID_PIXELS, prep_pairs, write_pair_records
from twnv.judging import ScoringFailed, load_overrides, nvs_means, score_nvs
from twnv.pipeline import (
    ROLES_NEEDED,
    ConfigError,
    Engine,
    OrderedSink,
    RunConfig,
    SampleFailed,
    completed_keys,
    config_hash,
    load_results,
)
from twnv.report import accuracy_table, budget_table, comparison_table, error_table, nvs_table

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("twnv")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


class UsageError(click.ClickException):
    exit_code = EXIT_CONFIG


def _load_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh), p.resolve().parent
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _backend_configs(doc: dict, mock: str | None, base: Path) -> dict[str, BackendConfig]:
    out = {}
    try:
        for role, table in doc.get("backends", {}).items():
            if role not in ROLES:
                raise UsageError(f"config: unknown backend role {role!r}")
            cfg = BackendConfig(**table)
            if cfg.kind == "mock" and not Path(cfg.fixture).is_absolute():
                cfg.fixture = str(base / cfg.fixture)
            out[role] = cfg
        if mock:
            fixture = str(Path(mock).resolve())
            for role in ROLES:
                out[role] = BackendConfig("mock", fixture=fixture)
    except TypeError as exc:
        raise UsageError(f"config: bad backend table ({exc})") from exc
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from exc
    return out


def _pick(flag, section: dict, key: str, default):
    return flag if flag is not None else section.get(key, default)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Orchestrate novel-view spatial reasoning runs and evaluate them."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# --- run ----------------------------------------------------------------------------------


@main.command()
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML config file.")
@click.option("--condition", type=click.Choice(list(ROLES_NEEDED)), help="Condition to run.")
@click.option("--format", "fmt", type=click.Choice(["natural", "discrete", "numerical"]), help="Instruction format.")
@click.option("--k", type=int, help="Vote runs per sample.")
@click.option("--n", type=int, help="Verification rounds (iterative).")
@click.option("--r", type=int, help="Reflection rounds (text_reflection).")
@click.option("--seed", type=int, help="Seed recorded with the run.")
@click.option("--workers", type=int, help="Samples processed concurrently.")
@click.option("--data-root", type=click.Path(file_okay=False), help="Root for manifest image paths.")
@click.option("--out", "out_root", type=click.Path(file_okay=False), help="Output root for results and transcripts.")
@click.option("--mock", type=click.Path(dir_okay=False), help="Serve every role from one mock fixture.")
@click.option("--check-images", type=click.Choice(["fail", "warn", "ignore"]), default="fail", show_default=True)
@click.option("--no-judge", is_flag=True, help="Skip answer judging and error attribution.")
def run(manifest, config_path, condition, fmt, k, n, r, seed, workers, data_root, out_root, mock, check_images, no_judge):
    """Run one condition over MANIFEST, resuming completed samples.

    Results go to OUT/results-<condition>.jsonl; transcripts to
    OUT/<sample>__<condition>/.
    """
    doc, base = _load_config(config_path)
    sec = doc.get("run", {})
    try:
        cfg = RunConfig(
            condition=_pick(condition, sec, "condition", None) or "baseline",
            instruction_format=_pick(fmt, sec, "format", "numerical"),
            k=_pick(k, sec, "k", 3),
            n=_pick(n, sec, "n", 0),
            r=_pick(r, sec, "r", 0),
            seed=_pick(seed, sec, "seed", 0),
            backends=_backend_configs(doc, mock, base),
            temperature=sec.get("temperature", 1.0),
            max_output_tokens=sec.get("max_output_tokens", 1024),
            judge=not no_judge and sec.get("judge", True),
            attribute=not no_judge and sec.get("attribute", True),
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    workers = _pick(workers, sec, "workers", 4)
    if workers < 1:
        raise UsageError("workers must be >= 1")
    data_root = _pick(data_root, sec, "data_root", None)
    out = Path(_pick(out_root, sec, "out", "out"))

    try:
        samples = load_manifest(manifest, data_root, check_images=check_images)
    except (SchemaError, OSError) as exc:
        raise UsageError(str(exc)) from exc

    needed = set(ROLES_NEEDED[cfg.condition]) | ({"judge"} if cfg.judge and "judge" in cfg.backends else set())
    missing = [role for role in ROLES_NEEDED[cfg.condition] if role not in cfg.backends]
    if missing:
        raise UsageError(f"{cfg.condition} needs backend config for roles {missing}")
    try:
        backends = {role: open_backend(cfg.backends[role]) for role in sorted(needed)}
    except (OSError, ValueError, BackendError) as exc:
        raise UsageError(f"cannot open backend: {exc}") from exc

    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    mid = manifest_id(manifest)
    results_path = out / f"results-{cfg.label}.jsonl"
    done = completed_keys(results_path)
    todo = [s for s in samples if (s.id, cfg.label, chash) not in done]
    log.info("%d samples, %d already complete", len(samples), len(samples) - len(todo))

    ledger = CallLedger()
    engine = Engine(cfg, backends, out, data_root=data_root, ledger=ledger, manifest_id=mid, cfg_hash=chash)
    failures = 0
    interrupted = False
    handled: set[str] = set()
    with OrderedSink(results_path, [s.id for s in todo]) as sink:
        pool = ThreadPoolExecutor(max_workers=workers)
        futures = {pool.submit(engine.run, s): s for s in todo}
        try:
            for fut in as_completed(futures):
                sample = futures[fut]
                try:
                    record = fut.result()
                except SampleFailed as exc:
                    failures += 1
                    record = exc.record
                    click.echo(f"FAILED {sample.id}: {exc.reason}", err=True)
                sink.put(sample.id, record.summary().to_dict())
                handled.add(sample.id)
        except KeyboardInterrupt:
            interrupted = True
            click.echo("interrupted: finishing in-flight samples", err=True)
            pool.shutdown(wait=True, cancel_futures=True)
            for fut, sample in futures.items():
                if fut.done() and not fut.cancelled() and sample.id not in handled:
                    try:
                        sink.put(sample.id, fut.result().summary().to_dict())
                    except SampleFailed as exc:
                        sink.put(sample.id, exc.record.summary().to_dict())
        finally:
            pool.shutdown(wait=True)
    for b in backends.values():
        b.close()

    calls = ledger.to_dict()
    click.echo(
        f"{cfg.label}: {len(todo) - failures} done, {failures} failed, {len(samples) - len(todo)} resumed; "
        f"{calls['vlm_calls']} VLM calls, {calls['synth_calls']} synth calls -> {results_path}"
    )
    if interrupted or failures:
        sys.exit(EXIT_PARTIAL)


# --- report -------------------------------------------------------------------------------


def _group(results) -> dict[str, list]:
    groups: dict[str, list] = defaultdict(list)
    for r in results:
        groups[r.condition].append(r)
    return dict(groups)


@main.command()
@click.argument("results", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--compare", "compare_path", type=click.Path(exists=True, dir_okay=False),
              help="Baseline results; adds delta columns against RESULTS.")
@click.option("--overrides", type=click.Path(exists=True, dir_okay=False), help="Manual error-label sidecar.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Write CSV and JSON tables here.")
def report(results, manifest, compare_path, overrides, out_dir):
    """Accuracy, error-distribution and budget tables for RESULTS files."""
    try:
        samples = load_manifest(manifest, check_images="ignore")
    except SchemaError as exc:
        raise UsageError(str(exc)) from exc
    mid = manifest_id(manifest)
    rows = []
    for path in results:
        try:
            rows.extend(load_results(path))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    base_rows = load_results(compare_path) if compare_path else []
    ids = {r.manifest_id for r in rows + base_rows if r.manifest_id}
    if len(ids) > 1 or (ids and mid not in ids):
        raise UsageError(f"results come from different manifests ({sorted(ids)}); expected {mid}")
    if not rows:
        click.echo("warning: no results to report", err=True)
    labels = load_overrides(overrides) if overrides else None

    groups = _group(rows)
    try:
        stats = {label: aggregate(items, samples, labels) for label, items in groups.items()}
    except (KeyError, ValueError) as exc:
        raise UsageError(f"results do not match the manifest: {exc}") from exc
    tables = {"accuracy": accuracy_table(stats), "errors": error_table(stats), "budget": budget_table(groups)}
    summary = {"manifest_id": mid, "conditions": {k: v.to_dict() for k, v in stats.items()}}

    if compare_path:
        base_groups = _group(base_rows)
        if len(base_groups) != 1 or len(groups) != 1:
            raise UsageError("--compare needs exactly one condition in each side")
        (base_label, base_items), = base_groups.items()
        (aug_label, _), = groups.items()
        base_stats = aggregate(base_items, samples, labels)
        deltas = compare(base_stats, stats[aug_label])
        tables["comparison"] = comparison_table(deltas, base_label, aug_label)
        summary["comparison"] = {
            "base": base_label,
            "aug": aug_label,
            "deltas": {k: {"base": d.base, "aug": d.aug, "pp": d.pp, "relative_gain": d.relative_gain}
                       for k, d in deltas.items()},
        }

    for table in tables.values():
        click.echo(table.text())
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, table in tables.items():
            (out / f"{name}.csv").write_text(table.csv(), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- prep ---------------------------------------------------------------------------------


@main.command()
@click.argument("pairs", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="PairRecord JSON-lines output.")
@click.option("--scale-mode", type=click.Choice(["lstsq", "median"]), default="lstsq", show_default=True)
@click.option("--min-matches", type=int, default=MIN_MATCHES, show_default=True)
@click.option("--min-valid", type=int, default=MIN_VALID_PIXELS, show_default=True, help="Jointly valid depth pixels required.")
@click.option("--bucket-base", type=int, default=1024, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
def prep(pairs, out_path, scale_mode, min_matches, min_valid, bucket_base, workers):
    """Filter, pose, scale and bucket training pairs from PAIRS."""
    if min_matches < 0 or min_valid < 1 or workers < 1 or bucket_base < 64:
        raise UsageError("min-matches >= 0, min-valid >= 1, workers >= 1, bucket-base >= 64")
    try:
        records = prep_pairs(pairs, scale_mode, min_matches, min_valid, bucket_base, workers=workers)
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pair_records(out, records)
    counts = defaultdict(int)
    for rec in records:
        counts[rec.disposition] += 1
    for rec in records:
        if rec.disposition != "kept":
            click.echo(f"{rec.disposition} {rec.pair_id}: {rec.reason}", err=True)
    click.echo(f"{counts['kept']} kept, {counts['discarded']} discarded, {counts['failed']} failed -> {out}")
    if counts["failed"]:
        sys.exit(EXIT_PARTIAL)


# --- nvs-eval -----------------------------------------------------------------------------


@main.command("nvs-eval")
@click.argument("triples", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML config with a judge backend.")
@click.option("--mock", type=click.Path(dir_okay=False), help="Mock fixture for the judge.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Write per-item JSONL and table CSV here.")
def nvs_eval(triples, config_path, mock, out_dir):
    """Score generated views on IC / CO / RN from TRIPLES.

    Each line: {"item_id", "dataset", "source", "target", "generated"},
    image paths relative to the triples file.
    """
    doc, base = _load_config(config_path)
    cfgs = _backend_configs(doc, mock, base)
    if "judge" not in cfgs:
        raise UsageError("nvs-eval needs a judge backend (--mock or [backends.judge])")
    try:
        judge = open_backend(cfgs["judge"])
    except (OSError, ValueError, BackendError) as exc:
        raise UsageError(f"cannot open judge backend: {exc}") from exc
    root = Path(triples).resolve().parent
    ledger = CallLedger()
    scored, failed = [], []
    with open(triples, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                item = str(row["item_id"])
                refs = [ImageRef.from_path(root / row[k]) for k in ("source", "target", "generated")]
            except (json.JSONDecodeError, KeyError, OSError) as exc:
                failed.append((f"line {lineno}", f"unreadable triple: {exc}"))
                continue
            try:
                score = score_nvs(judge, *refs, ledger, cfgs["judge"].model_id, scope=item)
            except ScoringFailed as exc:
                failed.append((item, str(exc)))
                continue
            scored.append((item, row.get("dataset", "default"), score))

    groups: dict[str, list] = defaultdict(list)
    for _, dataset, score in scored:
        groups[dataset].append(score)
    means = {name: nvs_means(items) for name, items in sorted(groups.items())}
    means["overall"] = nvs_means([s for _, _, s in scored])
    table = nvs_table(means, len(failed))
    click.echo(table.text())
    for item, reason in failed:
        click.echo(f"FAILED {item}: {reason}", err=True)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "nvs_items.jsonl", "w", encoding="utf-8") as fh:
            for item, dataset, score in scored:
                fh.write(json.dumps({"item_id": item, "dataset": dataset, **score.to_dict()}, sort_keys=True) + "\n")
        (out / "nvs.csv").write_text(table.csv(), encoding="utf-8")
    if failed:
        sys.exit(EXIT_PARTIAL)


# --- validate-manifest --------------------------------------------------------------------


@main.command("validate-manifest")
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--data-root", type=click.Path(file_okay=False))
@click.option("--check-images", type=click.Choice(["fail", "warn", "ignore"]), default="warn", show_default=True)
def validate_manifest(manifest, data_root, check_images):
    """Check MANIFEST against the sample schema and print category totals."""
    try:
        samples = load_manifest(manifest, data_root, check_images=check_images)
    except (SchemaError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    counts = {c: 0 for c in CATEGORIES}
    subs = set()
    for s in samples:
        counts[s.category] += 1
        subs.add(s.subcategory)
    click.echo(f"{len(samples)} samples, {len(subs)} subcategories, manifest id {manifest_id(manifest)}")
    for c in CATEGORIES:
        click.echo(f"  {c:<13}{counts[c]:>5}")


if __name__ == "__main__":
    main()
