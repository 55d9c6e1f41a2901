"""Exporter tests: conversion, logit parity against the source ecosystem,
corpus export, and loud failures on unsupported architectures.

The build sandbox has no route to a model hub, so the source checkpoint is a
locally-initialized transformers Llama saved to disk; the conversion and
parity machinery is identical to the pretrained case.
"""

import json
import os

import numpy as np
import pytest
import torch
from transformers import AutoModelForCausalLM, LlamaConfig, LlamaForCausalLM
from transformers import PreTrainedTokenizerFast

from ffnprune import calibration as engine_calibration
from ffnprune import checkpoint as engine_checkpoint
from ffnprune import corpus as engine_corpus
from ffnprune.errors import CapacityError
from ffnprune.model import forward as engine_forward

from ffnprune_exporter import (
    UnsupportedArchitectureError,
    export_corpus,
    export_model,
    load_reference,
)

SAMPLE_TEXT = (
    "the quick brown fox jumps over the lazy dog. "
    "pack my box with five dozen liquor jugs. "
    "how vexingly quick daft zebras jump! "
) * 200


def build_tokenizer():
    from tokenizers import Tokenizer, models, pre_tokenizers, trainers

    tok = Tokenizer(models.BPE(unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    trainer = trainers.BpeTrainer(
        vocab_size=512, special_tokens=["<unk>"],
        initial_alphabet=pre_tokenizers.ByteLevel.alphabet())
    tok.train_from_iterator([SAMPLE_TEXT], trainer)
    return PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="<unk>")


def build_source(vocab_size, tied=False, n_kv_heads=None, seed=0):
    cfg = LlamaConfig(
        vocab_size=vocab_size, hidden_size=64, intermediate_size=256,
        num_hidden_layers=2, num_attention_heads=4,
        num_key_value_heads=n_kv_heads or 4, max_position_embeddings=128,
        rms_norm_eps=1e-5, rope_theta=10000.0, tie_word_embeddings=tied,
        attention_bias=False, mlp_bias=False)
    torch.manual_seed(seed)
    return LlamaForCausalLM(cfg).eval()


@pytest.fixture(scope="module")
def tokenizer():
    return build_tokenizer()


@pytest.fixture(scope="module")
def source_dir(tokenizer, tmp_path_factory):
    path = tmp_path_factory.mktemp("source") / "llama-tiny"
    model = build_source(tokenizer.vocab_size, seed=3)
    model.save_pretrained(str(path))
    tokenizer.save_pretrained(str(path))
    return str(path)


@pytest.fixture(scope="module")
def exported(source_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("exported") / "ckpt"
    source = AutoModelForCausalLM.from_pretrained(source_dir)
    manifest = export_model(source, str(out), reference_seqs=8, reference_len=16,
                            seed=1, source_id=source_dir)
    return str(out), manifest, source


class TestModelExport:
    def test_engine_loads_and_shapes_match(self, exported):
        out, manifest, source = exported
        engine_model = engine_checkpoint.load_checkpoint(out)
        cfg = engine_model.config
        assert cfg.d_model == source.config.hidden_size
        assert cfg.n_blocks == source.config.num_hidden_layers
        assert cfg.d_ff_per_block == [source.config.intermediate_size] * cfg.n_blocks
        assert cfg.pos_scheme == "rope"

    def test_named_tensor_round_trip_bytes(self, exported):
        out, manifest, source = exported
        engine_model = engine_checkpoint.load_checkpoint(out)
        src = source.state_dict()["model.layers.0.self_attn.q_proj.weight"]
        src_bytes = src.to(torch.float32).numpy().astype("<f4").tobytes()
        assert engine_model.blocks[0].attn_q.astype("<f4").tobytes() == src_bytes

    def test_down_projection_is_transposed(self, exported):
        out, manifest, source = exported
        engine_model = engine_checkpoint.load_checkpoint(out)
        src = source.state_dict()["model.layers.0.mlp.down_proj.weight"]
        assert engine_model.blocks[0].ffn_down.shape == tuple(reversed(src.shape))
        assert np.allclose(engine_model.blocks[0].ffn_down,
                           src.to(torch.float32).numpy().T, atol=0)

    def test_logit_parity_eight_reference_sequences(self, exported):
        """[SECONDARY] acceptance: engine vs source logits <= 1e-3 max abs."""
        out, manifest, source = exported
        engine_model = engine_checkpoint.load_checkpoint(out)
        seqs, ref_logits = load_reference(out)
        assert len(seqs) == 8
        worst = 0.0
        for seq, ref in zip(seqs, ref_logits):
            got = engine_forward(engine_model, np.asarray(seq)).logits
            worst = max(worst, float(np.max(np.abs(got - ref))))
        print(f"ACCEPTANCE exporter-parity: {'PASS' if worst <= 1e-3 else 'FAIL'} "
              f"(max abs diff {worst:.2e})")
        assert worst <= 1e-3

    def test_tied_head_export_parity(self, tokenizer, tmp_path):
        model = build_source(tokenizer.vocab_size, tied=True, seed=9)
        export_model(model, str(tmp_path / "tied"), reference_seqs=2,
                     reference_len=8, seed=2)
        engine_model = engine_checkpoint.load_checkpoint(str(tmp_path / "tied"))
        assert engine_model.config.tied_head
        seqs, ref_logits = load_reference(str(tmp_path / "tied"))
        for seq, ref in zip(seqs, ref_logits):
            got = engine_forward(engine_model, np.asarray(seq)).logits
            assert np.max(np.abs(got - ref)) <= 1e-3

    def test_grouped_kv_rejected_with_tensor_names(self, tokenizer, tmp_path):
        model = build_source(tokenizer.vocab_size, n_kv_heads=2, seed=4)
        with pytest.raises(UnsupportedArchitectureError) as exc:
            export_model(model, str(tmp_path / "gqa"))
        assert "k_proj" in str(exc.value)

    def test_export_manifest_mapping_is_total(self, exported):
        out, manifest, source = exported
        with open(os.path.join(out, "manifest.json"), encoding="utf-8") as fh:
            engine_manifest = json.load(fh)
        engine_names = {t["name"] for t in engine_manifest["tensors"]}
        mapped = {rule["target"] for rule in manifest["mapping"]}
        assert engine_names == mapped


class TestCorpusExport:
    def test_token_count_matches_file_length(self, tokenizer, tmp_path):
        text = tmp_path / "text.txt"
        text.write_text(SAMPLE_TEXT, encoding="utf-8")
        count = export_corpus([str(text)], tokenizer, str(tmp_path / "corpus"))
        size = os.path.getsize(tmp_path / "corpus" / "tokens.u32")
        assert size == 4 * count
        meta = json.loads((tmp_path / "corpus" / "corpus.json").read_text())
        assert meta["count"] == count
        assert meta["vocab_size"] == tokenizer.vocab_size

    def test_empty_text_rejected_downstream(self, tokenizer, tmp_path):
        text = tmp_path / "empty.txt"
        text.write_text("", encoding="utf-8")
        count = export_corpus([str(text)], tokenizer, str(tmp_path / "corpus0"))
        assert count == 0
        ids, vocab = engine_corpus.load_corpus(str(tmp_path / "corpus0"))
        assert ids.size == 0
        with pytest.raises(CapacityError):
            engine_calibration.sample_calibration(ids, 1, 4, seed=0)

    def test_vocab_mismatch_rejected(self, tokenizer, tmp_path):
        text = tmp_path / "text.txt"
        text.write_text("hello", encoding="utf-8")
        from ffnprune_exporter import ExportError
        with pytest.raises(ExportError):
            export_corpus([str(text)], tokenizer, str(tmp_path / "bad"),
                          expected_vocab=tokenizer.vocab_size + 1)

    def test_calibration_sampling_matches_recorded_fixture(self, tokenizer, tmp_path):
        """Exported corpus -> seeded sampling reproduces a fixture generated once."""
        text = tmp_path / "text.txt"
        text.write_text(SAMPLE_TEXT, encoding="utf-8")
        export_corpus([str(text)], tokenizer, str(tmp_path / "corpus"))

        ids, _ = engine_corpus.load_corpus(str(tmp_path / "corpus"))
        calib = engine_calibration.sample_calibration(ids, n_samples=4, seq_len=32,
                                                      seed=5)
        fixture = {"seed": 5, "n_samples": 4, "seq_len": 32,
                   "sequences": [s.tolist() for s in calib.sequences]}
        (tmp_path / "fixture.json").write_text(json.dumps(fixture))

        recorded = json.loads((tmp_path / "fixture.json").read_text())
        ids2, _ = engine_corpus.load_corpus(str(tmp_path / "corpus"))
        calib2 = engine_calibration.sample_calibration(
            ids2, recorded["n_samples"], recorded["seq_len"], recorded["seed"])
        assert [s.tolist() for s in calib2.sequences] == recorded["sequences"]
