from __future__ import annotations

import datetime as dt
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from scifig.config import load_figure_classes
from scifig.models import (
    DocumentRecord,
    ElementKind,
    FigureAsset,
    LayoutDocument,
    LayoutElement,
    LayoutPage,
    SourceClass,
    Triplet,
)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def figure_classes():
    return load_figure_classes(None)


def make_record(doc_id: str, **overrides) -> DocumentRecord:
    defaults = dict(
        doc_id=doc_id,
        doi=None,
        title=f"Title of {doc_id}",
        source_class=SourceClass.journal,
        venue="Journal of Tests",
        citation_count=3,
        download_rank_percentile=0.1,
        disciplines=["Chemistry"],
        license="cc-by",
        version_date=dt.date(2025, 1, 1),
    )
    defaults.update(overrides)
    return DocumentRecord(**defaults)


def make_element(
    kind: ElementKind,
    index: int,
    page: int = 1,
    text: str | None = None,
    image_ref: str | None = None,
    confidence: float = 0.95,
    bbox=(0.0, 0.0, 100.0, 100.0),
) -> LayoutElement:
    if kind is ElementKind.figure and image_ref is None:
        image_ref = f"img_{index}.png"
    if kind in (ElementKind.caption, ElementKind.paragraph) and text is None:
        text = f"element {index}"
    return LayoutElement(
        kind=kind,
        page=page,
        bbox=bbox,
        text=text,
        image_ref=image_ref,
        reading_order_index=index,
        confidence=confidence,
    )


def make_doc(doc_id: str, elements: list[LayoutElement], ocr_tokens=None) -> LayoutDocument:
    pages: dict[int, list[LayoutElement]] = {}
    for el in elements:
        pages.setdefault(el.page, []).append(el)
    return LayoutDocument(
        doc_id=doc_id,
        pages=[LayoutPage(number=n, elements=els) for n, els in sorted(pages.items())],
        ocr_tokens=ocr_tokens or {},
    )


def make_figure(figure_id: str = "f1", width: int = 400, height: int = 300, **overrides) -> FigureAsset:
    defaults = dict(
        figure_id=figure_id,
        image_ref=f"{figure_id}.png",
        width_px=width,
        height_px=height,
        page=1,
        bbox=(0.0, 0.0, float(width), float(height)),
        subfigures=[],
    )
    defaults.update(overrides)
    return FigureAsset(**defaults)


def make_triplet(
    triplet_id: str = "doc-f001",
    caption: str = "Absorption spectra of the prepared samples at 550 nm.",
    contexts: list[str] | None = None,
    **overrides,
) -> Triplet:
    defaults = dict(
        triplet_id=triplet_id,
        doc_id=triplet_id.split("-")[0],
        figure=make_figure(triplet_id),
        raw_caption=caption,
        figure_identifiers=["Figure 1"],
        contexts=contexts if contexts is not None else [],
    )
    defaults.update(overrides)
    return Triplet(**defaults)


def structured_image(seed: int, size: tuple[int, int] = (320, 260)) -> np.ndarray:
    """Smooth synthetic grayscale image with enough structure to hash robustly."""
    rng = np.random.default_rng(seed)
    w, h = size
    x = np.linspace(0.0, 1.0, w)
    y = np.linspace(0.0, 1.0, h)
    xx, yy = np.meshgrid(x, y)
    img = 90.0 + 120.0 * xx + 40.0 * np.sin(6.0 * np.pi * yy)
    for _ in range(4):
        cx, cy, amp, sigma = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(30, 70), rng.uniform(0.05, 0.2)
        img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
    return np.clip(img, 0, 255)


def save_png(array: np.ndarray, path: Path) -> None:
    Image.fromarray(array.astype(np.uint8), mode="L").save(path)
