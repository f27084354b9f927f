"""End-to-end composition: BTP -> QTP -> combine -> CTP, plus FLOPs accounting."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .btp import block_coarsen, btp_mask
from .config import PruneConfig
from .ctp import CTPDecision, DecoderTrace, run_ctp
from .errors import DocPruneError, GeometryError
from .imagecore import PatchGrid, RasterImage, mode_intensity, tile_patches, to_grayscale
from .masks import TokenMask
from .metrics import DECODER_7B, VISION_ENCODER, FlopsReport, ModelShape, pipeline_flops
from .qtp import EmbeddingMatrix, combine_masks, qtp_pipeline


class StageError(DocPruneError):
    """Failure inside one pipeline stage; ``cause`` keeps the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class BTPResult:
    grid: PatchGrid
    mode: int
    mask: TokenMask  # block-coarsened


def run_btp(image: RasterImage, config: PruneConfig, tau_bg: Optional[float] = None) -> BTPResult:
    gray = to_grayscale(image)
    grid = tile_patches(gray, config.patch_size)
    m = mode_intensity(gray)
    mask = btp_mask(grid, m, config.tau_e, config.tau_bg if tau_bg is None else tau_bg)
    return BTPResult(grid=grid, mode=m, mask=block_coarsen(mask, config.block))


def run_qtp(
    doc: EmbeddingMatrix,
    qst: EmbeddingMatrix,
    grid: tuple[int, int],
    target: tuple[int, int],
    config: PruneConfig,
) -> TokenMask:
    if doc.count != grid[0] * grid[1]:
        raise GeometryError(
            f"document embeddings {doc.values.shape} do not fill the declared {grid[0]}x{grid[1]} retrieval grid"
        )
    _, mask = qtp_pipeline(doc, qst, grid, target, config.sigma, config.tau_qst)
    return block_coarsen(mask, config.block)


@dataclass(frozen=True)
class PageResult:
    btp: BTPResult
    qtp: Optional[TokenMask]
    combined: TokenMask


@dataclass(frozen=True)
class PipelineResult:
    pages: list[PageResult]
    ctp: Optional[CTPDecision]
    report: FlopsReport


def _run_page(image, doc, qst, grid, config) -> PageResult:
    try:
        b = run_btp(image, config)
    except Exception as exc:
        raise StageError("btp", exc) from exc
    if doc is None:
        return PageResult(btp=b, qtp=None, combined=b.mask)
    try:
        q = run_qtp(doc, qst, grid, (b.grid.rows, b.grid.cols), config)
        combined = combine_masks(b.mask, q)
    except Exception as exc:
        raise StageError("qtp", exc) from exc
    return PageResult(btp=b, qtp=q, combined=combined)


def run_pipeline(
    images: Sequence[RasterImage],
    config: PruneConfig,
    docs: Optional[Sequence[EmbeddingMatrix]] = None,
    qst: Optional[EmbeddingMatrix] = None,
    grid: Optional[tuple[int, int]] = None,
    trace: Optional[DecoderTrace] = None,
    shape_enc: ModelShape = VISION_ENCODER,
    shape_dec: ModelShape = DECODER_7B,
    jobs: int = 1,
) -> PipelineResult:
    """Prune each page independently (up to ``jobs`` at once), then CTP over the joint trace.

    The trace must cover exactly the visual tokens that survive BTP/QTP
    across all pages. Without a trace the report is encoder-side only.
    """
    if docs is not None:
        if qst is None or grid is None:
            raise StageError("qtp", ValueError("question embeddings and retrieval grid are required with document embeddings"))
        if len(docs) != len(images):
            raise StageError("qtp", GeometryError(f"{len(docs)} document embedding files for {len(images)} pages"))
    page_docs = list(docs) if docs is not None else [None] * len(images)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        pages = list(pool.map(lambda args: _run_page(*args, qst, grid, config), zip(images, page_docs)))

    n0 = sum(p.btp.grid.rows * p.btp.grid.cols for p in pages)
    staged: list[tuple[str, int]] = [("btp", sum(p.btp.mask.kept_count() for p in pages))]
    if docs is not None:
        staged.append(("qtp", sum(p.combined.kept_count() for p in pages)))
    n_enc = staged[-1][1]

    decision = None
    if trace is not None:
        try:
            if trace.n_visual != n_enc:
                raise GeometryError(f"trace has {trace.n_visual} visual tokens but {n_enc} survive encoder-side pruning")
            decision = run_ctp(trace, config)
        except Exception as exc:
            raise StageError("ctp", exc) from exc
        staged.append(("ctp", decision.kept))
        shape_dec = replace(shape_dec, num_layers=trace.num_layers)
    try:
        report = pipeline_flops(
            shape_enc,
            shape_dec,
            n0,
            staged,
            decision.l_star if decision is not None else None,
            text_tokens=config.text_tokens,
        )
    except Exception as exc:
        raise StageError("flops", exc) from exc
    report.extra.update(
        {
            "criterion": config.criterion if decision is not None else None,
            "config": config.to_dict(),
            "encoder_shape": shape_enc.name,
            "decoder_shape": shape_dec.name,
            "decoder_layers": shape_dec.num_layers,
            "pages": [
                {
                    "rows": p.btp.grid.rows,
                    "cols": p.btp.grid.cols,
                    "mode_intensity": p.btp.mode,
                    "btp_kept": p.btp.mask.kept_count(),
                    "qtp_kept": None if p.qtp is None else p.qtp.kept_count(),
                    "combined_kept": p.combined.kept_count(),
                }
                for p in pages
            ],
        }
    )
    return PipelineResult(pages=pages, ctp=decision, report=report)
