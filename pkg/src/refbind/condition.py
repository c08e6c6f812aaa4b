"""Reference-image conditioning: vision token blocks, concept embeddings,
text+vision sequence assembly, and the cross-attention read.

The conditioning sequence is the concatenation [text tokens, block_1, ...,
block_k] where block_i holds the N vision tokens of the i-th reference.
Cross attention reads the whole sequence as keys/values, so without any
slot marking the blocks are interchangeable; a concept embedding adds one
learnable [1, C] row to every token of block i to encode "this is slot i".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .layers import Layer, Linear, MultiHeadAttention, gelu, sinusoidal_table
from .numerics import Tensor
from .prompt import TooManyConcepts, Vocabulary

REFERENCE_KINDS = ("face-analog", "body-analog", "animal-analog")


@dataclass
class ReferenceImage:
    pixels: np.ndarray          # [H_r, W_r, 3] in [0, 1]
    kind: str = "face-analog"

    def __post_init__(self):
        if self.kind not in REFERENCE_KINDS:
            raise ValueError(f"unknown reference kind {self.kind!r}")
        self.pixels = np.clip(np.asarray(self.pixels, dtype=np.float64), 0.0, 1.0)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise nm.DimensionError(
                f"reference image must be [H, W, 3], got {list(self.pixels.shape)}")


@dataclass
class VisionTokenBlock:
    tokens: Tensor              # [N, C]
    source_slot: int            # position in the ordered reference list


@dataclass
class ConditioningSequence:
    tokens: Tensor              # [L_T + k*N, C]
    block_map: list             # per-token: "text" or the int slot index

    def __len__(self) -> int:
        return self.tokens.shape[0]


class ConceptEmbeddingTable(Layer):
    """One learnable [1, C] row per reference slot, trained with the model."""

    def __init__(self, r_max: int, channels: int, rng: np.random.Generator,
                 std: float = 0.02):
        self.embeddings = nm.randn((r_max, channels), rng, std=std, requires_grad=True)

    @property
    def r_max(self) -> int:
        return self.embeddings.shape[0]

    @property
    def channels(self) -> int:
        return self.embeddings.shape[1]


class ReferenceEncoder(Layer):
    """Patch-flatten + two-layer MLP mapping one image to N vision tokens.

    The image splits into a fixed grid of N patches; each flattened patch
    passes through the shared MLP, so identical images always produce
    identical blocks.
    """

    def __init__(self, image_size: int, channels: int, rng: np.random.Generator,
                 grid: int = 2, hidden: int = 128):
        if image_size % grid != 0:
            raise nm.DimensionError(f"image size {image_size} not divisible by grid {grid}")
        self.fc_in = Linear((image_size // grid) ** 2 * 3, hidden, rng)
        self.fc_out = Linear(hidden, channels, rng)
        self._size = image_size
        self._grid = grid

    @property
    def tokens_per_image(self) -> int:
        return self._grid * self._grid

    def _to_patches(self, images: np.ndarray) -> np.ndarray:
        m, h, w, c = images.shape
        g = self._grid
        ph, pw = h // g, w // g
        x = images.reshape(m, g, ph, g, pw, c)
        x = x.transpose(0, 1, 3, 2, 4, 5)          # [M, g, g, ph, pw, c]
        return x.reshape(m * g * g, ph * pw * c)

    def __call__(self, images: np.ndarray) -> Tensor:
        """[M, H, W, 3] -> [M, N, C] token blocks for M reference images."""
        images = np.asarray(images)
        if images.shape[-3] != self._size or images.shape[-2] != self._size:
            raise nm.DimensionError(
                f"expected {self._size}x{self._size} references, got {list(images.shape)}")
        m = images.shape[0]
        patches = Tensor(self._to_patches(images).astype(self.fc_in.weight.dtype))
        tokens = self.fc_out(gelu(self.fc_in(patches)))
        n = self.tokens_per_image
        return nm.reshape(tokens, (m, n, tokens.shape[-1]))


def encode_reference(img: ReferenceImage, encoder: ReferenceEncoder,
                     slot: int = 0) -> VisionTokenBlock:
    tokens = encoder(img.pixels[None])
    return VisionTokenBlock(nm.reshape(tokens, tokens.shape[1:]), source_slot=slot)


def apply_concept_embeddings(blocks: list[VisionTokenBlock],
                             table: ConceptEmbeddingTable) -> list[VisionTokenBlock]:
    """Add row i of the table to every token of block i (slot order)."""
    if len(blocks) > table.r_max:
        raise TooManyConcepts(f"{len(blocks)} blocks exceed table capacity {table.r_max}")
    out = []
    for i, block in enumerate(blocks):
        row = nm.narrow(table.embeddings, 0, i, 1)          # [1, C]
        out.append(VisionTokenBlock(block.tokens + row, block.source_slot))
    return out


def apply_per_token_encoding(blocks: list[VisionTokenBlock]) -> list[VisionTokenBlock]:
    """Ablation variant: distinct sinusoidal offset per vision token.

    Positions run across the concatenated blocks, so every token gets a
    different (fixed, non-learnable) offset instead of one row per block.
    """
    if not blocks:
        return []
    n = blocks[0].tokens.shape[0]
    c = blocks[0].tokens.shape[1]
    table = sinusoidal_table(n * len(blocks), c)
    out = []
    for i, block in enumerate(blocks):
        offset = Tensor(table[i * n:(i + 1) * n].astype(block.tokens.dtype))
        out.append(VisionTokenBlock(block.tokens + offset, block.source_slot))
    return out


def assemble(text_tokens: Tensor, blocks: list[VisionTokenBlock]) -> ConditioningSequence:
    """Concatenate [T, I'_1, ..., I'_k] and record the per-token block map."""
    channels = text_tokens.shape[-1]
    block_map: list = ["text"] * text_tokens.shape[0]
    parts = [text_tokens]
    for block in blocks:
        if block.tokens.shape[-1] != channels:
            raise nm.DimensionError(
                f"block channel dim {block.tokens.shape[-1]} != text channel dim {channels}")
        parts.append(block.tokens)
        block_map.extend([block.source_slot] * block.tokens.shape[0])
    tokens = nm.concat(parts, axis=0) if len(parts) > 1 else text_tokens
    return ConditioningSequence(tokens=tokens, block_map=block_map)


def cross_attention(query: Tensor, cond: ConditioningSequence,
                    attn: MultiHeadAttention) -> Tensor:
    """Latent queries attend over the full conditioning sequence."""
    if query.shape[-1] != cond.tokens.shape[-1]:
        raise nm.DimensionError(
            f"query channels {query.shape[-1]} != conditioning channels {cond.tokens.shape[-1]}")
    return attn(query, cond.tokens)


class TextEncoder(Layer):
    """Toy text encoder: learnable token embeddings + fixed sinusoidal
    position offsets (token order must be visible to cross attention, as it
    is for any real position-aware text encoder)."""

    def __init__(self, vocab: Vocabulary, channels: int, max_len: int,
                 rng: np.random.Generator, std: float = 0.02):
        self.table = nm.randn((len(vocab), channels), rng, std=std, requires_grad=True)
        self._pos = sinusoidal_table(max_len, channels) * 0.2
        self._pad_id = vocab.PAD
        self.max_len = max_len

    def __call__(self, ids: np.ndarray) -> Tensor:
        """[L] or [B, L] int ids -> [L, C] or [B, L, C] position-aware tokens."""
        ids = np.asarray(ids)
        emb = nm.embedding(self.table, ids)
        pos = self._pos[:ids.shape[-1]].astype(emb.dtype)
        return emb + Tensor(pos)

    def key_mask(self, ids: np.ndarray) -> np.ndarray:
        return np.asarray(ids) != self._pad_id


def build_conditioning(text_ids: np.ndarray, ref_images: np.ndarray,
                       ref_counts: np.ndarray, text_enc: TextEncoder,
                       ref_enc: ReferenceEncoder, table: ConceptEmbeddingTable,
                       *, use_ce: bool = True, ce_mode: str = "block"):
    """Batched conditioning assembly for training and sampling.

    Args:
        text_ids: [B, L_T] token ids (already anchored or plain per variant).
        ref_images: [B, K, H, W, 3] reference stacks, zero-padded to K slots.
        ref_counts: [B] number of real references per example.
    Returns:
        (tokens [B, L_T + K*N, C], key_mask [B, L_T + K*N], block_map).
    """
    if ce_mode not in ("block", "per_token"):
        raise ValueError(f"unknown ce_mode {ce_mode!r}")
    b, k = ref_images.shape[0], ref_images.shape[1]
    if k > table.r_max:
        raise TooManyConcepts(f"{k} reference slots exceed table capacity {table.r_max}")
    n = ref_enc.tokens_per_image

    text_tokens = text_enc(text_ids)                        # [B, L_T, C]
    flat = ref_images.reshape(b * k, *ref_images.shape[2:])
    vision = ref_enc(flat)                                  # [B*K, N, C]
    vision = nm.reshape(vision, (b, k * n, vision.shape[-1]))

    if use_ce:
        if ce_mode == "block":
            slot_ids = np.repeat(np.arange(k), n)
            rows = nm.embedding(table.embeddings, slot_ids)  # [K*N, C]
            vision = vision + rows
        else:
            sin = sinusoidal_table(k * n, table.channels).astype(vision.dtype)
            vision = vision + Tensor(sin)

    tokens = nm.concat([text_tokens, vision], axis=1)
    text_mask = text_enc.key_mask(text_ids)
    slot_mask = np.arange(k)[None, :] < np.asarray(ref_counts)[:, None]
    vision_mask = np.repeat(slot_mask, n, axis=1)
    key_mask = np.concatenate([text_mask, vision_mask], axis=1)
    block_map = ["text"] * text_ids.shape[1]
    for slot in range(k):
        block_map.extend([slot] * n)
    return tokens, key_mask, block_map
