import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refbind import condition as cond
from refbind import numerics as nm
from refbind.layers import MultiHeadAttention
from refbind.numerics import Tensor
from refbind.prompt import TooManyConcepts, Vocabulary


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="module")
def encoder():
    return cond.ReferenceEncoder(16, 64, np.random.default_rng(1))


def make_block(data, slot=0):
    return cond.VisionTokenBlock(Tensor(np.asarray(data, dtype=np.float64)), slot)


def random_glyph(rng):
    return np.clip(rng.random((16, 16, 3)), 0, 1)


class TestEncodeReference:
    def test_zero_image_equals_bias_pathway_and_is_stable(self, encoder):
        img = cond.ReferenceImage(np.zeros((16, 16, 3)))
        a = cond.encode_reference(img, encoder).tokens.data
        b = cond.encode_reference(img, encoder).tokens.data
        assert np.array_equal(a, b)
        # all-zero patches give identical rows through the shared MLP
        assert np.allclose(a, a[0][None, :])

    def test_same_glyph_bitwise_identical(self, encoder, rng):
        img = cond.ReferenceImage(random_glyph(rng))
        a = cond.encode_reference(img, encoder).tokens.data
        b = cond.encode_reference(img, encoder).tokens.data
        assert np.array_equal(a, b)

    def test_distinct_glyphs_distinct_blocks(self, encoder):
        gen = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            a = cond.encode_reference(cond.ReferenceImage(random_glyph(gen)), encoder)
            b = cond.encode_reference(cond.ReferenceImage(random_glyph(gen)), encoder)
            va, vb = a.tokens.data.ravel(), b.tokens.data.ravel()
            cos = va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb))
            worst = max(worst, cos)
        assert worst < 0.99

    def test_size_mismatch_rejected(self, encoder):
        with pytest.raises(nm.DimensionError):
            encoder(np.zeros((1, 8, 8, 3)))

    def test_block_shape(self, encoder, rng):
        block = cond.encode_reference(cond.ReferenceImage(random_glyph(rng)), encoder)
        assert block.tokens.shape == (4, 64)


class TestConceptEmbeddings:
    def test_zero_table_is_identity(self, rng):
        table = cond.ConceptEmbeddingTable(4, 3, rng)
        table.embeddings.data[:] = 0.0
        blocks = [make_block(rng.standard_normal((2, 3)), 0),
                  make_block(rng.standard_normal((2, 3)), 1)]
        out = cond.apply_concept_embeddings(blocks, table)
        for before, after in zip(blocks, out):
            assert np.array_equal(before.tokens.data, after.tokens.data)

    def test_worked_broadcast_example_exact(self, rng):
        table = cond.ConceptEmbeddingTable(4, 3, rng)
        table.embeddings.data[0] = [0.5, 0.0, -1.0]
        block = make_block([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
        out = cond.apply_concept_embeddings([block], table)[0]
        assert np.array_equal(out.tokens.data,
                              [[1.5, 1.0, 0.0], [2.5, 2.0, 1.0]])

    def test_swap_does_not_commute_with_distinct_rows(self, rng):
        table = cond.ConceptEmbeddingTable(4, 8, rng)
        blocks = [make_block(rng.standard_normal((4, 8)), 0),
                  make_block(rng.standard_normal((4, 8)), 1)]
        swapped_then_ce = cond.apply_concept_embeddings(blocks[::-1], table)
        ce_then_swapped = cond.apply_concept_embeddings(blocks, table)[::-1]
        diffs = [np.abs(a.tokens.data - b.tokens.data).max()
                 for a, b in zip(swapped_then_ce, ce_then_swapped)]
        assert max(diffs) > 0

    def test_too_many_blocks(self, rng):
        table = cond.ConceptEmbeddingTable(2, 4, rng)
        blocks = [make_block(np.zeros((1, 4)), i) for i in range(3)]
        with pytest.raises(TooManyConcepts):
            cond.apply_concept_embeddings(blocks, table)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_additive_in_block_input(self, seed):
        # CE(I + J) == CE(I) + J, row-wise
        gen = np.random.default_rng(seed)
        table = cond.ConceptEmbeddingTable(4, 5, np.random.default_rng(0))
        i_block = gen.standard_normal((3, 5))
        j_block = gen.standard_normal((3, 5))
        lhs = cond.apply_concept_embeddings([make_block(i_block + j_block)], table)
        rhs = cond.apply_concept_embeddings([make_block(i_block)], table)
        assert np.allclose(lhs[0].tokens.data, rhs[0].tokens.data + j_block)

    def test_gradients_reach_only_used_rows(self, rng):
        table = cond.ConceptEmbeddingTable(4, 6, np.random.default_rng(3))
        blocks = [make_block(rng.standard_normal((2, 6)), i) for i in range(2)]
        out = cond.apply_concept_embeddings(blocks, table)
        loss = nm.tsum(nm.concat([b.tokens for b in out], axis=0) ** 2)
        nm.backward(loss)
        grads = table.embeddings.grad
        assert np.linalg.norm(grads[0]) > 0
        assert np.linalg.norm(grads[1]) > 0
        assert np.array_equal(grads[2:], np.zeros((2, 6)))


class TestPerTokenVariant:
    def test_tokens_get_distinct_offsets(self):
        blocks = [make_block(np.zeros((4, 16)), 0), make_block(np.zeros((4, 16)), 1)]
        out = cond.apply_per_token_encoding(blocks)
        all_tokens = np.concatenate([b.tokens.data for b in out])
        assert len({tuple(row) for row in all_tokens.round(9)}) == 8

    def test_empty_list(self):
        assert cond.apply_per_token_encoding([]) == []


class TestAssemble:
    def test_zero_blocks_is_text_only(self, rng):
        text = Tensor(rng.standard_normal((5, 8)))
        seq = cond.assemble(text, [])
        assert np.array_equal(seq.tokens.data, text.data)
        assert seq.block_map == ["text"] * 5

    def test_lengths_and_block_map(self, rng):
        text = Tensor(rng.standard_normal((16, 8)))
        blocks = [make_block(rng.standard_normal((4, 8)), 0),
                  make_block(rng.standard_normal((4, 8)), 1)]
        seq = cond.assemble(text, blocks)
        assert len(seq) == 24
        assert seq.block_map == ["text"] * 16 + [0] * 4 + [1] * 4

    def test_swapped_blocks_permute_map(self, rng):
        text = Tensor(rng.standard_normal((2, 8)))
        blocks = [make_block(rng.standard_normal((1, 8)), 0),
                  make_block(rng.standard_normal((1, 8)), 1)]
        seq = cond.assemble(text, blocks[::-1])
        assert seq.block_map == ["text", "text", 1, 0]

    def test_channel_mismatch(self, rng):
        text = Tensor(rng.standard_normal((2, 8)))
        with pytest.raises(nm.DimensionError):
            cond.assemble(text, [make_block(rng.standard_normal((1, 4)), 0)])


class TestCrossAttention:
    def test_single_conditioning_token_copies_value(self, rng):
        attn = MultiHeadAttention(8, 2, np.random.default_rng(5))
        token = Tensor(rng.standard_normal((1, 8)))
        seq = cond.assemble(token, [])
        query = Tensor(rng.standard_normal((6, 8)))
        out = cond.cross_attention(query, seq, attn).data
        expected = attn.wo(attn.wv(token)).data
        assert np.allclose(out, np.repeat(expected, 6, axis=0), atol=1e-12)

    def test_block_permutation_invariant_without_ce(self, rng):
        attn = MultiHeadAttention(16, 4, np.random.default_rng(6))
        text = Tensor(rng.standard_normal((5, 16)))
        blocks = [make_block(rng.standard_normal((4, 16)), i) for i in range(2)]
        query = Tensor(rng.standard_normal((7, 16)))
        out_a = cond.cross_attention(query, cond.assemble(text, blocks), attn).data
        out_b = cond.cross_attention(query, cond.assemble(text, blocks[::-1]), attn).data
        assert np.abs(out_a - out_b).max() < 1e-6

    def test_block_permutation_sensitive_with_ce(self, rng):
        attn = MultiHeadAttention(16, 4, np.random.default_rng(6))
        table = cond.ConceptEmbeddingTable(4, 16, np.random.default_rng(8))
        text = Tensor(rng.standard_normal((5, 16)))
        blocks = [make_block(rng.standard_normal((4, 16)), i) for i in range(2)]
        query = Tensor(rng.standard_normal((7, 16)))
        tagged = cond.apply_concept_embeddings(blocks, table)
        tagged_swapped = cond.apply_concept_embeddings(blocks[::-1], table)
        out_a = cond.cross_attention(query, cond.assemble(text, tagged), attn).data
        out_b = cond.cross_attention(query, cond.assemble(text, tagged_swapped), attn).data
        assert np.linalg.norm(out_a - out_b) > 1e-3

    def test_channel_mismatch(self, rng):
        attn = MultiHeadAttention(8, 2, np.random.default_rng(5))
        seq = cond.assemble(Tensor(rng.standard_normal((3, 8))), [])
        with pytest.raises(nm.DimensionError):
            cond.cross_attention(Tensor(rng.standard_normal((2, 4))), seq, attn)


class TestBatchedConditioning:
    def test_shapes_masks_and_block_map(self):
        gen = np.random.default_rng(11)
        vocab = Vocabulary.default()
        text_enc = cond.TextEncoder(vocab, 32, 10, gen)
        ref_enc = cond.ReferenceEncoder(16, 32, gen)
        table = cond.ConceptEmbeddingTable(4, 32, gen)
        ids = np.full((2, 10), vocab.PAD)
        ids[:, 0] = vocab.BOS
        refs = gen.random((2, 3, 16, 16, 3))
        tokens, mask, block_map = cond.build_conditioning(
            ids, refs, np.array([3, 1]), text_enc, ref_enc, table)
        assert tokens.shape == (2, 10 + 12, 32)
        assert mask.shape == (2, 22)
        assert mask[0, 10:].all()
        assert mask[1, 10:14].all() and not mask[1, 14:].any()
        assert block_map == ["text"] * 10 + [0] * 4 + [1] * 4 + [2] * 4

    def test_ce_flag_off_matches_naive_concatenation(self):
        gen = np.random.default_rng(12)
        vocab = Vocabulary.default()
        text_enc = cond.TextEncoder(vocab, 16, 6, gen)
        ref_enc = cond.ReferenceEncoder(16, 16, gen)
        table = cond.ConceptEmbeddingTable(4, 16, gen)
        ids = np.full((1, 6), vocab.BOS)
        refs = gen.random((1, 2, 16, 16, 3))
        with_ce, _, _ = cond.build_conditioning(
            ids, refs, np.array([2]), text_enc, ref_enc, table, use_ce=True)
        without, _, _ = cond.build_conditioning(
            ids, refs, np.array([2]), text_enc, ref_enc, table, use_ce=False)
        naive_vision = ref_enc(refs[0]).data.reshape(1, 8, 16)
        assert np.allclose(without.data[:, 6:, :], naive_vision)
        assert not np.allclose(with_ce.data[:, 6:, :], naive_vision)
