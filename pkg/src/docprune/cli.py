"""``docprune`` command-line interface.

Machine output is one JSON object on stdout (or a CSV file). Failures print
``{"error": ..., "message": ..., "stage": ...}`` on stderr and exit with
1 (computation error) or 2 (usage or I/O error).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .analysis import find_manifests, layer_columns, layer_rows, score_bins, to_csv
from .config import CONFIG_ENV, PruneConfig, load_config
from .ctp import Criterion, run_ctp
from .errors import FormatError
from .imagecore import encode_image, load_image
from .metrics import DECODER_7B, VISION_ENCODER, report_csv, report_rows
from .pipeline import StageError, run_btp, run_pipeline, run_qtp
from .qtp import EmbeddingMatrix
from .synthgen import SynthSpec, gen_document, gen_embeddings, gen_trace
from .traceio import (
    atomic_write_bytes,
    atomic_write_text,
    decision_to_dict,
    dump_json,
    load_manifest,
    read_blob,
    write_blob,
    write_json,
    write_mask,
    write_trace,
)

EXIT_OK, EXIT_COMPUTE, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


def _grid(text: str) -> tuple[int, int]:
    for sep in ("x", "X", ","):
        if sep in text:
            a, b = text.split(sep, 1)
            try:
                rows, cols = int(a), int(b)
            except ValueError:
                break
            if rows < 1 or cols < 1:
                break
            return rows, cols
    raise argparse.ArgumentTypeError(f"grid must look like ROWSxCOLS, got {text!r}")


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pruning config (flag > --config file > $%s > preset defaults)" % CONFIG_ENV)
    g.add_argument("--config", type=Path, help="JSON file with any PruneConfig keys")
    g.add_argument("--pages", type=int, choices=(1, 2, 4), help="hyperparameter preset by page count")
    g.add_argument("--patch-size", type=int)
    g.add_argument("--tau-e", type=float)
    g.add_argument("--tau-bg", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--tau-qst", type=float)
    g.add_argument("--criterion", choices=[c.value for c in Criterion])
    g.add_argument("--tau-comp", type=float, help="accepts 'inf' to disable CTP")
    g.add_argument("--tau-att", type=float)
    g.add_argument("--block", type=int, help="block coarsening size in cells (1 disables)")
    g.add_argument("--ctp-window", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--text-tokens", type=int, help="non-visual decoder tokens added to every layer")
    return p


def _resolve_config(args) -> PruneConfig:
    overrides = {
        "pages": args.pages,
        "patch_size": args.patch_size,
        "tau_e": args.tau_e,
        "tau_bg": args.tau_bg,
        "sigma": args.sigma,
        "tau_qst": args.tau_qst,
        "criterion": args.criterion,
        "tau_comp": args.tau_comp,
        "tau_att": args.tau_att,
        "block": args.block,
        "ctp_window": tuple(args.ctp_window) if args.ctp_window else None,
        "text_tokens": args.text_tokens,
    }
    try:
        return load_config(args.config, overrides)
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _read_embeddings(path) -> EmbeddingMatrix:
    blob = read_blob(path, "DPEM")
    if blob.data.ndim != 2:
        raise FormatError(f"{path}: embedding blob must be 2-D, got dims {list(blob.dims)}")
    return EmbeddingMatrix.from_array(blob.data)


# -- commands ----------------------------------------------------------------


def cmd_btp(args) -> int:
    config = _resolve_config(args)
    result = run_btp(load_image(args.image), config)
    mask = result.mask
    if args.out_mask:
        write_mask(args.out_mask, mask, config.patch_size)
    _emit(
        {
            "rows": mask.rows,
            "cols": mask.cols,
            "mode_intensity": result.mode,
            "kept": mask.kept_count(),
            "total": mask.size,
            "drop_rate": mask.drop_rate(),
        }
    )
    return EXIT_OK


def cmd_qtp(args) -> int:
    config = _resolve_config(args)
    doc = _read_embeddings(args.doc_emb)
    qst = _read_embeddings(args.qst_emb)
    target = args.target_grid or args.grid
    mask = run_qtp(doc, qst, args.grid, target, config)
    if args.out_mask:
        write_mask(args.out_mask, mask, config.patch_size)
    _emit({"rows": mask.rows, "cols": mask.cols, "kept": mask.kept_count(), "total": mask.size, "drop_rate": mask.drop_rate()})
    return EXIT_OK


def cmd_ctp(args) -> int:
    config = _resolve_config(args)
    _, trace = load_manifest(args.trace_manifest)
    decision = run_ctp(trace, config)
    record = decision_to_dict(decision)
    record["config"] = config.to_dict()
    if args.out_decision:
        write_json(args.out_decision, record)
    _emit({k: record[k] for k in ("criterion", "l_star", "n_visual", "kept", "drop_rate_progressive")})
    return EXIT_OK


def cmd_pipeline(args) -> int:
    config = _resolve_config(args)
    images = []
    for path in args.image:
        try:
            images.append(load_image(path))
        except Exception as exc:
            raise StageError("load", exc) from exc
    docs = qst = None
    if args.doc_emb:
        if not args.qst_emb or not args.grid:
            raise UsageError("--doc-emb requires --qst-emb and --grid")
        try:
            docs = [_read_embeddings(p) for p in args.doc_emb]
            qst = _read_embeddings(args.qst_emb)
        except Exception as exc:
            raise StageError("load", exc) from exc
    trace = None
    if not args.no_ctp:
        if not args.trace_manifest:
            raise UsageError("--trace-manifest is required unless --no-ctp is given")
        try:
            _, trace = load_manifest(args.trace_manifest)
        except Exception as exc:
            raise StageError("load", exc) from exc
    result = run_pipeline(images, config, docs=docs, qst=qst, grid=args.grid, trace=trace, jobs=args.jobs)
    report = result.report.to_dict()
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, page in enumerate(result.pages):
            write_mask(out / f"page{i:03d}.btp.json", page.btp.mask, config.patch_size)
            if page.qtp is not None:
                write_mask(out / f"page{i:03d}.qtp.json", page.qtp, config.patch_size)
            write_mask(out / f"page{i:03d}.combined.json", page.combined, config.patch_size)
        if result.ctp is not None:
            write_json(out / "ctp_decision.json", decision_to_dict(result.ctp))
    if args.out_report:
        atomic_write_text(args.out_report, dump_json(report))
    if args.out_csv:
        shape_dec = DECODER_7B if trace is None else replace(DECODER_7B, num_layers=trace.num_layers)
        rows = report_rows(result.report, VISION_ENCODER, shape_dec, text_tokens=config.text_tokens)
        atomic_write_text(args.out_csv, report_csv(rows))
    _emit(
        {
            "tokens_per_stage": report["tokens_per_stage"],
            "encoder_drop_rate": report["encoder_drop_rate"],
            "decoder_drop_rate": report["decoder_drop_rate"],
            "encoder_flops": report["encoder_flops"],
            "decoder_flops": report["decoder_flops"],
            "prune_layer": report["prune_layer"],
        }
    )
    return EXIT_OK


def synthesize(spec_obj: dict, out_dir: Path, config: PruneConfig) -> dict:
    """Write the fixtures described by a synth spec JSON object; returns a summary."""
    spec = SynthSpec.from_dict(spec_obj)
    fmt = spec_obj.get("format", "ppm")
    out_dir.mkdir(parents=True, exist_ok=True)
    truth = gen_document(spec)
    image_name = f"page.{fmt}"
    atomic_write_bytes(out_dir / image_name, encode_image(truth.image, fmt))
    rows, cols = truth.background_patches.shape
    flat = truth.background_patches.ravel()
    summary = {"image": image_name, "truth": "truth.json", "rows": rows, "cols": cols}
    truth_obj = {
        "schema_version": 1,
        "rows": rows,
        "cols": cols,
        "patch_size": spec.patch_size,
        "background_value": spec.background_value,
        "background": [int(i) for i in flat.nonzero()[0]],
        "content": [int(i) for i in (~flat).nonzero()[0]],
    }
    docs = qst = grid = None
    emb = spec_obj.get("embeddings")
    if emb:
        grid = (int(emb["grid"][0]), int(emb["grid"][1]))
        doc_m, qst_m = gen_embeddings(
            grid[0], grid[1], int(emb.get("dim", 16)), int(emb.get("n_qst", 4)),
            hot_cells=emb.get("hot_cells", ()), seed=int(emb.get("seed", spec.seed)),
        )
        write_blob(out_dir / "doc.dpem", "DPEM", doc_m.values)
        write_blob(out_dir / "qst.dpem", "DPEM", qst_m.values)
        docs, qst = [doc_m], qst_m
        truth_obj["retrieval_grid"] = list(grid)
        summary.update({"doc_emb": "doc.dpem", "qst_emb": "qst.dpem", "grid": f"{grid[0]}x{grid[1]}"})
    tr = spec_obj.get("trace")
    if tr:
        n_visual = tr.get("n_visual", "auto")
        if n_visual == "auto":
            encoded = run_pipeline([truth.image], config, docs=docs, qst=qst, grid=grid)
            n_visual = encoded.report.tokens_per_stage[-1][1]
        trace = gen_trace(
            num_layers=int(tr.get("num_layers", 28)),
            dim=int(tr.get("dim", 64)),
            crossing_layer=int(tr["crossing_layer"]),
            n_visual=int(n_visual),
            spike_indices=[int(i) for i in tr.get("spike_indices", ()) if int(i) < int(n_visual)],
            seed=int(tr.get("seed", spec.seed)),
            spike_mass=float(tr.get("spike_mass", 0.9)),
            tau_comp=float(tr.get("tau_comp", 65.0)),
            vocab=int(tr.get("vocab", 32)),
        )
        write_trace(out_dir, trace, model_name="synthetic")
        summary.update({"trace_manifest": "trace.json", "n_visual": int(n_visual)})
    atomic_write_text(out_dir / "truth.json", dump_json(truth_obj))
    summary["background_patches"] = len(truth_obj["background"])
    return summary


def cmd_synth(args) -> int:
    config = _resolve_config(args)
    try:
        spec_obj = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{args.spec}: invalid JSON ({exc})") from None
    _emit(synthesize(spec_obj, Path(args.out_dir), config))
    return EXIT_OK


def cmd_analyze(args) -> int:
    fracs = args.top_frac or [0.1]
    directory = Path(args.traces)
    if not directory.is_dir():
        raise FileNotFoundError(f"trace directory not found: {directory}")
    manifests = find_manifests(directory)
    rows = layer_rows(manifests, fracs)
    atomic_write_text(args.out_csv, to_csv(rows, layer_columns(fracs)))
    if args.bins_csv:
        atomic_write_text(args.bins_csv, to_csv(score_bins(rows, args.bins), ["layer", "bin_lo", "bin_hi", "count", "mean_score"]))
    _emit({"traces": len(manifests), "rows": len(rows)})
    return EXIT_OK


ANALYZE_EPILOG = """\
CSV columns (one row per trace and layer):
  trace          manifest file stem
  layer          0-indexed decoder layer
  l2_norm        L2 norm of the last-token hidden state
  entropy        softmax entropy of the layer logits (empty without logits)
  feature_delta  L2 distance to the previous layer's hidden state (0 at layer 0)
  n_visual       number of visual tokens
  score          per-trace quality score from the manifest (empty if absent)
  top_mass_K     share of attention held by the top ceil(K*N) visual tokens
--bins-csv columns: layer, bin_lo, bin_hi, count, mean_score (L2 norm bins over scored traces).
"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="docprune", description="Document visual-token pruning toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    cfg = _config_parent()

    p = sub.add_parser("btp", parents=[cfg], help="background token pruning on a page image")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out-mask", type=Path)
    p.set_defaults(func=cmd_btp)

    p = sub.add_parser("qtp", parents=[cfg], help="question-aware pruning from retrieval embeddings")
    p.add_argument("--doc-emb", required=True, type=Path)
    p.add_argument("--qst-emb", required=True, type=Path)
    p.add_argument("--grid", required=True, type=_grid, help="retrieval feature grid ROWSxCOLS")
    p.add_argument("--target-grid", type=_grid, help="QA token grid ROWSxCOLS (default: --grid)")
    p.add_argument("--out-mask", type=Path)
    p.set_defaults(func=cmd_qtp)

    p = sub.add_parser("ctp", parents=[cfg], help="comprehension-aware pruning decision from a decoder trace")
    p.add_argument("--trace-manifest", required=True, type=Path)
    p.add_argument("--out-decision", type=Path)
    p.set_defaults(func=cmd_ctp)

    p = sub.add_parser("pipeline", parents=[cfg], help="BTP -> QTP -> CTP with FLOPs report")
    p.add_argument("--image", required=True, type=Path, nargs="+", help="one image per page")
    p.add_argument("--doc-emb", type=Path, nargs="+", help="one DPEM file per page")
    p.add_argument("--qst-emb", type=Path)
    p.add_argument("--grid", type=_grid)
    p.add_argument("--trace-manifest", type=Path)
    p.add_argument("--no-ctp", action="store_true", help="encoder-side pruning only")
    p.add_argument("--out-report", type=Path)
    p.add_argument("--out-csv", type=Path, help="stage,kept,drop_rate,flops rows")
    p.add_argument("--out-dir", type=Path, help="per-page masks and the CTP decision")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("synth", parents=[cfg], help="write synthetic fixtures from a spec JSON")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--out-dir", required=True, type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "analyze",
        help="per-layer comprehension and attention-mass CSV over a trace directory",
        epilog=ANALYZE_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--traces", required=True, type=Path, help="directory of trace manifests")
    p.add_argument("--out-csv", required=True, type=Path)
    p.add_argument("--top-frac", type=float, action="append", help="top fraction for attention mass (repeatable)")
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--bins-csv", type=Path)
    p.set_defaults(func=cmd_analyze)
    return parser


def _fail(code: int, exc: BaseException, stage: Optional[str] = None) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if stage:
        payload["stage"] = stage
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def _classify(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, OSError, FormatError)):
        return EXIT_IO
    return EXIT_COMPUTE


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        return _fail(_classify(exc.cause), exc, exc.stage)
    except (UsageError, OSError, FormatError, ValueError, ArithmeticError) as exc:
        return _fail(_classify(exc), exc)
    except Exception as exc:  # DocPruneError and friends
        return _fail(EXIT_COMPUTE, exc)


if __name__ == "__main__":
    sys.exit(main())
