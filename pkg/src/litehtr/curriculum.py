"""Synthetic document generation for the three-stage curriculum.

Stage 1 trains on small blocks of 1-4 lines with 1-4 words per line; stage 2
on taller pages of 3-14 lines; stage 3 on real (or target-domain) pages
supplied through a manifest. Because real handwriting datasets cannot be
redistributed, words are drawn by a procedural glyph renderer: each
character maps to a deterministic pseudo-random set of polyline strokes,
with style-controlled slant, thickness and baseline jitter. A manifest
loader is provided so externally supplied word/line crops can replace the
renderer when real data is available.

Every record derives its own sub-seed from (dataset seed, record index), so
generation is reproducible record-by-record.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image, ImageDraw

from .imaging import ImageTensor, save_image


class GenerationError(ValueError):
    pass


# ---- procedural glyph rendering ------------------------------------------


@dataclass(frozen=True)
class GlyphStyle:
    """Stroke parameters of the procedural handwriting renderer.

    ``variant`` selects an independent family of glyph shapes, standing in
    for a different script/handwriting style in transfer experiments.
    """

    height: int = 32
    thickness: int = 2
    slant: float = 0.15  # horizontal shear per unit height
    baseline_jitter: float = 0.08  # fraction of glyph height
    variant: int = 0


def _char_rng(c: str, variant: int) -> np.random.Generator:
    digest = hashlib.blake2s(f"{variant}:{c}".encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _glyph_strokes(c: str, variant: int) -> list[np.ndarray]:
    """Deterministic polyline strokes for one character, in the unit square
    (x right, y down)."""
    rng = _char_rng(c, variant)
    strokes = []
    for _ in range(rng.integers(2, 5)):
        pts = rng.uniform(0.05, 0.95, size=(int(rng.integers(2, 5)), 2))
        strokes.append(pts)
    return strokes


_UNRENDERABLE = {"\n", "\r", "\t", "\x0b", "\x0c"}


def render_word(
    text: str, style: GlyphStyle, seed: int = 0
) -> tuple[ImageTensor, tuple[int, int, int, int]]:
    """Draw ``text`` as dark ink on a light background.

    Returns the word image and the tight ink bounding box (top, left,
    bottom, right; exclusive bottom/right). Deterministic per
    (text, style, seed). Spaces advance the pen without ink.
    """
    if not text:
        raise GenerationError("empty word")
    for c in text:
        if c in _UNRENDERABLE:
            raise GenerationError(f"unrenderable character {c!r}")
    rng = np.random.default_rng(seed)
    h = style.height
    advance = int(round(h * 0.7))
    pad = max(style.thickness + 1, int(h * style.slant) + 2)
    canvas_w = advance * len(text) + 2 * pad
    canvas_h = h + 2 * pad
    im = Image.new("L", (canvas_w, canvas_h), 255)
    draw = ImageDraw.Draw(im)
    x0 = pad
    for c in text:
        jitter = rng.uniform(-style.baseline_jitter, style.baseline_jitter) * h
        if c != " ":
            for pts in _glyph_strokes(c, style.variant):
                xy = []
                for px, py in pts:
                    gx = x0 + px * (advance * 0.85) + style.slant * (1.0 - py) * h
                    gy = pad + py * h + jitter
                    xy.append((gx, gy))
                draw.line(xy, fill=30, width=style.thickness)
        x0 += advance
    arr = np.asarray(im, dtype=np.float32)[:, :, None] / 255.0
    ink = np.argwhere(arr[:, :, 0] < 0.5)
    if ink.size == 0:
        bbox = (0, 0, arr.shape[0], arr.shape[1])
    else:
        top, left = ink.min(axis=0)
        bottom, right = ink.max(axis=0) + 1
        bbox = (int(top), int(left), int(bottom), int(right))
    return ImageTensor(arr), bbox


def _render_cropped(text: str, style: GlyphStyle, seed: int) -> ImageTensor:
    img, (t, l, b, r) = render_word(text, style, seed)
    return ImageTensor(np.ascontiguousarray(img.data[t:b, l:r]))


# ---- pools ----------------------------------------------------------------


@dataclass(frozen=True)
class TextPool:
    """A pool of text units (words or whole lines) plus the style used to
    draw them. Entries from an external manifest carry pre-rendered images
    instead of being drawn procedurally."""

    texts: tuple[str, ...]
    style: GlyphStyle = GlyphStyle()
    images: tuple[str, ...] | None = None  # image paths, parallel to texts

    def __post_init__(self):
        if not self.texts:
            raise GenerationError("empty pool")

    @classmethod
    def synthetic_words(
        cls,
        alphabet: str,
        n_words: int,
        word_len: tuple[int, int] = (2, 5),
        seed: int = 0,
        style: GlyphStyle = GlyphStyle(),
    ) -> "TextPool":
        rng = np.random.default_rng(seed)
        letters = [c for c in alphabet if c not in _UNRENDERABLE and c != " "]
        if not letters:
            raise GenerationError("alphabet has no renderable characters")
        words = tuple(
            "".join(rng.choice(letters, size=rng.integers(word_len[0], word_len[1] + 1)))
            for _ in range(n_words)
        )
        return cls(words, style)

    @classmethod
    def from_manifest(cls, path, style: GlyphStyle = GlyphStyle()) -> "TextPool":
        """Load externally supplied word/line crops: JSONL records with
        ``image_path`` and ``text``."""
        texts, images = [], []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                texts.append(rec["text"])
                images.append(rec["image_path"])
        return cls(tuple(texts), style, tuple(images))

    def draw(self, index: int, seed: int) -> tuple[ImageTensor, str]:
        text = self.texts[index]
        if self.images is not None:
            from .imaging import load_image

            return load_image(self.images[index], channels=1), text
        return _render_cropped(text, self.style, seed), text


def make_line_pool(
    words: TextPool,
    n_lines: int,
    words_per_line: tuple[int, int] = (1, 4),
    seed: int = 0,
) -> TextPool:
    """Compose a pool of line texts by sampling from a word pool."""
    rng = np.random.default_rng(seed)
    lines = tuple(
        " ".join(
            words.texts[rng.integers(len(words.texts))]
            for _ in range(rng.integers(words_per_line[0], words_per_line[1] + 1))
        )
        for _ in range(n_lines)
    )
    return TextPool(lines, words.style, None)


# ---- stage specs and manifests -------------------------------------------


@dataclass(frozen=True)
class CurriculumStageSpec:
    stage: str  # "s1" | "s2" | "s3"
    count: int
    image_size: tuple[int, int]  # (H, W)
    lines_range: tuple[int, int]
    words_per_line_range: tuple[int, int] = (1, 4)  # s1 only
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("s1", "s2", "s3"):
            raise GenerationError(f"unknown stage {self.stage!r}")
        if self.count < 1:
            raise GenerationError("count must be >= 1")


def stage_defaults(stage: str, seed: int = 0) -> CurriculumStageSpec:
    """Published stage geometry: 50k 256x256 blocks of 1-4 lines / 1-4 words
    for stage 1; 78k 1024x1024 pages of 3-14 lines for stage 2; stage 3
    consumes real 1024x1024 pages."""
    if stage == "s1":
        return CurriculumStageSpec("s1", 50_000, (256, 256), (1, 4), (1, 4), seed)
    if stage == "s2":
        return CurriculumStageSpec("s2", 78_000, (1024, 1024), (3, 14), (1, 4), seed)
    if stage == "s3":
        return CurriculumStageSpec("s3", 1, (1024, 1024), (3, 14), (1, 4), seed)
    raise GenerationError(f"unknown stage {stage!r}")


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    transcript: str
    stage: str
    seed: int


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(
                    json.dumps(
                        {
                            "image_path": r.image_path,
                            "transcript": r.transcript,
                            "stage": r.stage,
                            "seed": r.seed,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        records = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                d = json.loads(line)
                records.append(
                    ManifestRecord(d["image_path"], d["transcript"], d["stage"], d["seed"])
                )
        return cls(records)

    def transcripts(self) -> list[str]:
        return [r.transcript for r in self.records]


# ---- composition ----------------------------------------------------------


def _paste_ink(canvas: np.ndarray, img: np.ndarray, top: int, left: int) -> None:
    h, w = img.shape[:2]
    region = canvas[top : top + h, left : left + w]
    np.minimum(region, img[: region.shape[0], : region.shape[1]], out=region)


def synthesize_block(
    pool: TextPool, spec: CurriculumStageSpec, rng: np.random.Generator
) -> tuple[ImageTensor, str]:
    """Stage-1 block: a few short lines of words on a fixed-size canvas.

    The transcript lists the placed words in raster order, lines separated
    by newlines; it is exact by construction.
    """
    if spec.stage != "s1":
        raise GenerationError("synthesize_block requires an s1 spec")
    canvas_h, canvas_w = spec.image_size
    n_lines = int(rng.integers(spec.lines_range[0], spec.lines_range[1] + 1))
    line_words = [
        [int(rng.integers(len(pool.texts))) for _ in range(
            int(rng.integers(spec.words_per_line_range[0], spec.words_per_line_range[1] + 1))
        )]
        for _ in range(n_lines)
    ]
    style = pool.style
    for attempt in range(5):
        scale = 0.8**attempt
        height = max(8, int(round(style.height * scale)))
        attempt_style = replace(style, height=height)
        img, transcript = _compose_lines(
            [
                [(pool.texts[w], attempt_style) for w in words]
                for words in line_words
            ],
            (canvas_h, canvas_w),
            rng,
            drop_overflow=False,
            min_lines=n_lines,
        )
        if img is not None:
            return img, transcript
    raise GenerationError(
        f"block content does not fit a {canvas_h}x{canvas_w} canvas after retries"
    )


def synthesize_page(
    pool: TextPool, spec: CurriculumStageSpec, rng: np.random.Generator
) -> tuple[ImageTensor, str]:
    """Stage-2 page: 3-14 (by default) pooled lines stacked top-to-bottom.
    On vertical overflow trailing lines are dropped, down to the stage
    minimum."""
    if spec.stage != "s2":
        raise GenerationError("synthesize_page requires an s2 spec")
    canvas_h, canvas_w = spec.image_size
    n_lines = int(rng.integers(spec.lines_range[0], spec.lines_range[1] + 1))
    line_texts = [pool.texts[int(rng.integers(len(pool.texts)))] for _ in range(n_lines)]
    img, transcript = _compose_lines(
        [[(t, pool.style)] for t in line_texts],
        (canvas_h, canvas_w),
        rng,
        drop_overflow=True,
        min_lines=spec.lines_range[0],
    )
    if img is None:
        raise GenerationError(
            f"page content does not fit a {canvas_h}x{canvas_w} canvas"
        )
    return img, transcript


def _compose_lines(
    lines: list[list[tuple[str, GlyphStyle]]],
    canvas_size: tuple[int, int],
    rng: np.random.Generator,
    drop_overflow: bool,
    min_lines: int,
) -> tuple[ImageTensor | None, str]:
    """Place rendered words line by line; returns (None, "") when the
    content cannot fit and dropping is not allowed."""
    canvas_h, canvas_w = canvas_size
    canvas = np.ones((canvas_h, canvas_w, 1), dtype=np.float32)
    margin = max(2, canvas_h // 32)
    # fit the glyph height to the densest line (advance is 0.7h per char,
    # inter-word gaps up to 1.5 chars wide) and, for fixed layouts, to the
    # line count; the caller's retry loop shrinks further if placement with
    # randomized gaps still overflows
    units = max(
        sum(len(t) for t, _ in words) + 1.5 * (len(words) - 1) for words in lines
    )
    h_fit = (0.88 * canvas_w - 2 * margin) / (0.75 * units)
    if not drop_overflow:
        h_fit = min(h_fit, (canvas_h - 2 * margin) / (1.8 * len(lines)))
    if h_fit < 6:
        return None, ""
    lines = [
        [(t, replace(s, height=min(s.height, int(h_fit)))) for t, s in words]
        for words in lines
    ]
    y = margin
    placed_lines: list[str] = []
    for words in lines:
        rendered = []
        for text, style in words:
            seed = int(rng.integers(0, 2**31))
            rendered.append((_render_cropped(text, style, seed), text))
        line_h = max(im.height for im, _ in rendered)
        char_w = np.median(
            [im.width / max(1, len(t.replace(" ", ""))) for im, t in rendered]
        )
        indent = margin + int(rng.uniform(0.0, 0.10) * canvas_w)
        x = indent
        positions = []
        ok = True
        for im, text in rendered:
            if x + im.width > canvas_w - margin:
                ok = False
                break
            positions.append((x, im))
            x += im.width + int(rng.uniform(0.5, 1.5) * char_w)
        line_gap = int(rng.uniform(0.2, 0.8) * line_h)
        if not ok or y + line_h > canvas_h - margin:
            if drop_overflow and len(placed_lines) >= min_lines:
                break
            return None, ""
        for x, im in positions:
            # bottom-align words on the line baseline
            _paste_ink(canvas[:, :, 0], im.data[:, :, 0], y + line_h - im.height, x)
        placed_lines.append(" ".join(t for t, _ in words))
        y += line_h + line_gap
    if len(placed_lines) < min_lines:
        return None, ""
    return ImageTensor(canvas), "\n".join(placed_lines)


# ---- dataset building -----------------------------------------------------


def record_rng(dataset_seed: int, index: int) -> np.random.Generator:
    """Per-record generator; parallel and serial generation agree."""
    return np.random.default_rng(np.random.SeedSequence(dataset_seed, spawn_key=(index,)))


def build_stage_dataset(
    spec: CurriculumStageSpec, pool: TextPool, out_dir
) -> DatasetManifest:
    """Generate ``spec.count`` records under ``out_dir`` and write the
    manifest ``<stage>.jsonl`` next to the images."""
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    synthesize = synthesize_block if spec.stage == "s1" else synthesize_page
    if spec.stage == "s3":
        raise GenerationError(
            "stage 3 uses real page data: pass its manifest through directly"
        )
    manifest = DatasetManifest()
    for i in range(spec.count):
        rng = record_rng(spec.seed, i)
        img, transcript = synthesize(pool, spec, rng)
        path = os.path.join(images_dir, f"{spec.stage}_{i:06d}.png")
        save_image(img, path)
        manifest.records.append(ManifestRecord(path, transcript, spec.stage, spec.seed))
    manifest.save(os.path.join(out_dir, f"{spec.stage}.jsonl"))
    return manifest
