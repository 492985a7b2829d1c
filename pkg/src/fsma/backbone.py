"""Frozen-encoder block-token extraction.

Every supported backbone exposes the same contract: feed a preprocessed RGB
image, get back an ``(n_blocks, token_dim)`` stack whose row i is the [CLS]
token at the output of block i (after that block's final residual addition,
input-to-output order). Real CLIP encoders run through an optional
torch/transformers path; three deterministic stub backbones make every
downstream module testable with no pretrained weights present:

* ``stub-const``  — block i emits the constant vector (i, i, ..., i).
* ``stub-hash``   — tokens drawn from an RNG seeded by a hash of the pixel
  buffer: same image => bit-identical stack, different images differ.
* ``stub-gauss``  — a cluster center keyed by the image's quantized mean RGB
  plus small per-image noise; images painted with the same base color land in
  the same tight cluster (see :mod:`fsma.synthetic`, which paints matching
  corpora).

Extraction is a pure function of (pixels, spec): bit-identical on repeat
calls, and the encoder weights are never mutated.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, FormatError, NumericError, ValidationError

SPLITS = ("train", "support", "test")

CLIP_INPUT_SIZE = 224
CLIP_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
CLIP_STD = np.array([0.26862954, 0.26130258, 0.27577711])

# mean-RGB quantization grid shared with fsma.synthetic
GAUSS_GRID = 16

_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")

_HF_MODEL_NAMES = {
    "vit-l-14": "openai/clip-vit-large-patch14",
    "vit-b-32": "openai/clip-vit-base-patch32",
}


@dataclass(frozen=True)
class ImageRecord:
    """One row of a dataset manifest."""

    image_id: str
    path: str
    class_label: str
    session_id: int
    split: str

    def __post_init__(self):
        if not _SAFE_ID.match(self.image_id):
            raise ValidationError(
                f"image_id {self.image_id!r} must match [A-Za-z0-9._-]+ "
                "(it becomes a cache filename)"
            )
        if self.split not in SPLITS:
            raise ValidationError(
                f"record {self.image_id!r}: split {self.split!r} not in {SPLITS}"
            )
        if self.session_id < 1:
            raise ValidationError(
                f"record {self.image_id!r}: session_id must be >= 1"
            )


@dataclass(frozen=True)
class BackboneSpec:
    """Identity and geometry of a frozen feature extractor.

    ``weights_id`` and ``preprocess`` namespace the feature cache, so two
    specs that could ever disagree on outputs must differ in at least one of
    them (stub parameters are folded into ``weights_id`` for that reason).
    """

    name: str
    n_blocks: int
    token_dim: int
    preprocess: str
    weights_id: str
    stub_seed: int = 0
    stub_noise: float = 0.02

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValidationError("n_blocks must be >= 1")
        if self.token_dim < 1:
            raise ValidationError("token_dim must be >= 1")

    @property
    def is_stub(self) -> bool:
        return self.name.startswith("stub-")

    @staticmethod
    def vit_l_14() -> "BackboneSpec":
        return BackboneSpec(
            name="vit-l-14",
            n_blocks=24,
            token_dim=1024,
            preprocess="clip-224",
            weights_id="clip-vit-l-14-openai",
        )

    @staticmethod
    def vit_b_32() -> "BackboneSpec":
        return BackboneSpec(
            name="vit-b-32",
            n_blocks=12,
            token_dim=768,
            preprocess="clip-224",
            weights_id="clip-vit-b-32-openai",
        )

    @staticmethod
    def stub_const(n_blocks: int, token_dim: int) -> "BackboneSpec":
        return BackboneSpec(
            name="stub-const",
            n_blocks=n_blocks,
            token_dim=token_dim,
            preprocess="raw01",
            weights_id=f"stub-const-n{n_blocks}-d{token_dim}",
        )

    @staticmethod
    def stub_hash(n_blocks: int, token_dim: int, seed: int = 0) -> "BackboneSpec":
        return BackboneSpec(
            name="stub-hash",
            n_blocks=n_blocks,
            token_dim=token_dim,
            preprocess="raw01",
            weights_id=f"stub-hash-n{n_blocks}-d{token_dim}-s{seed}",
            stub_seed=seed,
        )

    @staticmethod
    def stub_gauss(
        n_blocks: int, token_dim: int, seed: int = 0, noise: float = 0.02
    ) -> "BackboneSpec":
        return BackboneSpec(
            name="stub-gauss",
            n_blocks=n_blocks,
            token_dim=token_dim,
            preprocess="raw01",
            weights_id=f"stub-gauss-n{n_blocks}-d{token_dim}-s{seed}-ns{noise:g}",
            stub_seed=seed,
            stub_noise=noise,
        )

    @staticmethod
    def named(name: str, **stub_kwargs) -> "BackboneSpec":
        """Build a spec from a CLI-style name.

        Real backbones ignore ``stub_kwargs``; stubs require n_blocks and
        token_dim in them.
        """
        if name == "vit-l-14":
            return BackboneSpec.vit_l_14()
        if name == "vit-b-32":
            return BackboneSpec.vit_b_32()
        makers = {
            "stub-const": BackboneSpec.stub_const,
            "stub-hash": BackboneSpec.stub_hash,
            "stub-gauss": BackboneSpec.stub_gauss,
        }
        if name in makers:
            try:
                return makers[name](**stub_kwargs)
            except TypeError as exc:
                raise ValidationError(f"bad stub parameters for {name}: {exc}")
        raise ValidationError(f"unknown backbone {name!r}")


@dataclass
class BlockTokenStack:
    """The n per-block [CLS] tokens of one image."""

    image_id: str
    spec: BackboneSpec
    tokens: np.ndarray  # (n_blocks, token_dim) float64, blocks input->output


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _decode_rgb(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("RGB", "RGBA", "L", "LA", "P", "I", "I;16", "F"):
                raise FormatError(f"{path}: unsupported image mode {img.mode!r}")
            rgb = img.convert("RGB")
            return np.asarray(rgb, dtype=np.uint8)
    except FormatError:
        raise
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image at {path}: {exc}")


def _clip_preprocess(arr: np.ndarray) -> np.ndarray:
    # resize shortest side to 224 (bicubic), center crop 224, scale, normalize
    img = Image.fromarray(arr, mode="RGB")
    w, h = img.size
    scale = CLIP_INPUT_SIZE / min(w, h)
    if scale != 1.0:
        img = img.resize(
            (max(CLIP_INPUT_SIZE, round(w * scale)), max(CLIP_INPUT_SIZE, round(h * scale))),
            resample=Image.BICUBIC,
        )
    w, h = img.size
    left = (w - CLIP_INPUT_SIZE) // 2
    top = (h - CLIP_INPUT_SIZE) // 2
    img = img.crop((left, top, left + CLIP_INPUT_SIZE, top + CLIP_INPUT_SIZE))
    x = np.asarray(img, dtype=np.float64) / 255.0
    return (x - CLIP_MEAN) / CLIP_STD


def preprocess_image(record: ImageRecord | str, spec: BackboneSpec) -> np.ndarray:
    """Decode and normalize one image into the backbone's expected input.

    Accepts a record or a bare path. Returns an (H', W', 3) float64 array;
    for the ``clip-224`` recipe H' = W' = 224 with per-channel normalization,
    for ``raw01`` the native resolution scaled to [0, 1].
    """
    path = record if isinstance(record, str) else record.path
    arr = _decode_rgb(path)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"{path}: expected 3 channels, got shape {arr.shape}")
    if spec.preprocess == "clip-224":
        return _clip_preprocess(arr)
    if spec.preprocess == "raw01":
        return arr.astype(np.float64) / 255.0
    raise ValidationError(f"unknown preprocess recipe {spec.preprocess!r}")


# ---------------------------------------------------------------------------
# stub extraction
# ---------------------------------------------------------------------------

def _hash_words(data: bytes) -> list[int]:
    digest = hashlib.sha256(data).digest()
    return np.frombuffer(digest, dtype=np.uint32).tolist()


def _stub_const_tokens(spec: BackboneSpec) -> np.ndarray:
    blocks = np.arange(1, spec.n_blocks + 1, dtype=np.float64)
    return np.repeat(blocks[:, None], spec.token_dim, axis=1)


def _stub_hash_tokens(image: np.ndarray, spec: BackboneSpec) -> np.ndarray:
    words = _hash_words(np.ascontiguousarray(image).tobytes())
    rng = np.random.default_rng([spec.stub_seed, *words])
    return rng.normal(0.0, 1.0, (spec.n_blocks, spec.token_dim))


def _stub_gauss_tokens(image: np.ndarray, spec: BackboneSpec) -> np.ndarray:
    mean_rgb = image.mean(axis=(0, 1))
    cell = np.clip(np.floor(mean_rgb * GAUSS_GRID).astype(np.int64), 0, GAUSS_GRID - 1)
    center_rng = np.random.default_rng([spec.stub_seed, 1, *cell.tolist()])
    center = center_rng.normal(0.0, 1.0, (spec.n_blocks, spec.token_dim))
    words = _hash_words(np.ascontiguousarray(image).tobytes())
    noise_rng = np.random.default_rng([spec.stub_seed, 2, *words])
    noise = noise_rng.normal(0.0, 1.0, (spec.n_blocks, spec.token_dim))
    return center + spec.stub_noise * noise


# ---------------------------------------------------------------------------
# real CLIP extraction (optional torch/transformers path)
# ---------------------------------------------------------------------------

_clip_models: dict[str, object] = {}


def _load_clip_model(spec: BackboneSpec):
    if spec.weights_id in _clip_models:
        return _clip_models[spec.weights_id]
    try:
        import torch
        from transformers import CLIPVisionModel
    except ImportError as exc:
        raise ValidationError(
            f"backbone {spec.name!r} needs the optional [clip] extra "
            f"(torch + transformers): {exc}"
        )
    import os

    source = _HF_MODEL_NAMES[spec.name]
    local_root = os.environ.get("FSMA_CLIP_LOCAL_ROOT")
    if local_root:
        source = os.path.join(local_root, source.replace("/", "--"))
    model = CLIPVisionModel.from_pretrained(source)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    if model.config.num_hidden_layers != spec.n_blocks:
        raise ValidationError(
            f"{spec.name}: loaded encoder has {model.config.num_hidden_layers} "
            f"blocks, spec says {spec.n_blocks}"
        )
    if model.config.hidden_size != spec.token_dim:
        raise ValidationError(
            f"{spec.name}: loaded encoder width {model.config.hidden_size} "
            f"!= spec token_dim {spec.token_dim}"
        )
    _clip_models[spec.weights_id] = (torch, model)
    return _clip_models[spec.weights_id]


def _clip_tokens(image: np.ndarray, spec: BackboneSpec) -> np.ndarray:
    torch, model = _load_clip_model(spec)
    x = torch.from_numpy(image.transpose(2, 0, 1)[None]).to(torch.float32)
    with torch.no_grad():
        out = model(pixel_values=x, output_hidden_states=True)
    # hidden_states[0] is the patch embedding; [1..n] are the block outputs
    cls = [h[0, 0].numpy() for h in out.hidden_states[1:]]
    return np.stack(cls).astype(np.float64)


# ---------------------------------------------------------------------------
# extraction entry point
# ---------------------------------------------------------------------------

def extract_block_tokens(image: np.ndarray, spec: BackboneSpec) -> np.ndarray:
    """Run one preprocessed image through the frozen backbone.

    Returns the (n_blocks, token_dim) stack of [CLS] tokens. Raises
    ValidationError on input shape mismatch and NumericError (naming the
    first offending block) if any activation is non-finite.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected (H, W, 3) input, got {image.shape}")
    if spec.preprocess == "clip-224" and image.shape[:2] != (CLIP_INPUT_SIZE, CLIP_INPUT_SIZE):
        raise ValidationError(
            f"{spec.name} expects {CLIP_INPUT_SIZE}x{CLIP_INPUT_SIZE} input, "
            f"got {image.shape[:2]}"
        )

    if spec.name == "stub-const":
        tokens = _stub_const_tokens(spec)
    elif spec.name == "stub-hash":
        tokens = _stub_hash_tokens(image, spec)
    elif spec.name == "stub-gauss":
        tokens = _stub_gauss_tokens(image, spec)
    elif spec.name in _HF_MODEL_NAMES:
        tokens = _clip_tokens(image, spec)
    else:
        raise ValidationError(f"unknown backbone {spec.name!r}")

    if tokens.shape != (spec.n_blocks, spec.token_dim):
        raise ValidationError(
            f"{spec.name} produced {tokens.shape}, "
            f"expected ({spec.n_blocks}, {spec.token_dim})"
        )
    finite = np.isfinite(tokens).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0]) + 1
        raise NumericError(f"non-finite activations in block {bad} of {spec.name}")
    return tokens


def extract_stack(record: ImageRecord, spec: BackboneSpec) -> BlockTokenStack:
    """Decode, preprocess and extract in one step."""
    image = preprocess_image(record, spec)
    return BlockTokenStack(record.image_id, spec, extract_block_tokens(image, spec))
