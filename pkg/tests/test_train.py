import math

import numpy as np
import pytest

from colonmm.adapter import AdapterConfig, EncoderConfig
from colonmm.checkpoint import load_arrays, save_arrays
from colonmm.compiler import InstructionRecord, ImageRef
from colonmm.errors import DivergenceError, ParseError, UsageError
from colonmm.lm import LMConfig
from colonmm.taxonomy import Split
from colonmm.train import (
    ModelBundle,
    TrainPlan,
    build_train_sample,
    bundle_arrays,
    group_hashes,
    init_bundle,
    load_bundle,
    save_bundle,
    train,
)

ENC = EncoderConfig(height=28, width=28, patch=14, dim=6)
ADA = AdapterConfig(kernels=(2,), include_global=True, in_dim=6, out_dim=16)
LMC = LMConfig(layers=1, heads=2, model_dim=16, context_len=128)


def tiny_bundle(seed=5):
    return init_bundle(ENC, ADA, LMC, seed=seed)


def tiny_corpus(bundle, n=6, seed=0):
    rng = np.random.default_rng(seed)
    corpus = []
    for i in range(n):
        record = InstructionRecord(
            record_id=f"demo/img{i:03d}#CLS",
            image=ImageRef("demo", f"img{i:03d}", f"img{i:03d}.png"),
            task="CLS",
            instruction="<image>\nCategorize the object.",
            response=f"lesion {i % 2}",
            split=Split.TRAIN,
            template_index=0,
            category=f"lesion {i % 2}",
        )
        image = rng.uniform(size=(28, 28, 3))
        corpus.append(build_train_sample(record, image, bundle))
    return corpus


class TestCheckpointContainer:
    def test_roundtrip_and_meta(self, tmp_path):
        arrays = {
            "b": np.arange(6, dtype=np.float64).reshape(2, 3),
            "a": np.ones(4, dtype=np.float32),
            "mask": np.array([True, False]),
            "ids": np.arange(3, dtype=np.int64),
        }
        path = tmp_path / "ckpt.bin"
        save_arrays(path, arrays, meta={"note": 1})
        loaded, meta = load_arrays(path)
        assert meta == {"note": 1}
        for name, arr in arrays.items():
            np.testing.assert_array_equal(loaded[name], arr)
            assert loaded[name].dtype == arr.dtype

    def test_serialization_is_name_order_independent(self, tmp_path):
        a = {"x": np.ones(3), "y": np.zeros(2)}
        b = {"y": np.zeros(2), "x": np.ones(3)}
        save_arrays(tmp_path / "a.bin", a)
        save_arrays(tmp_path / "b.bin", b)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a container at all")
        with pytest.raises(ParseError):
            load_arrays(path)


class TestBundlePersistence:
    def test_roundtrip(self, tmp_path):
        bundle = tiny_bundle()
        corpus = tiny_corpus(bundle)
        train(TrainPlan(stage="sft", epochs=1, batch_size=4, lora_rank=2, lora_alpha=4, seed=0),
              corpus, bundle)
        path = tmp_path / "bundle.bin"
        save_bundle(bundle, path)
        loaded = load_bundle(path)
        assert group_hashes(loaded) == group_hashes(bundle)
        assert loaded.adapter_cfg == bundle.adapter_cfg
        assert loaded.lm.cfg == bundle.lm.cfg
        assert loaded.lora.keys() == bundle.lora.keys()


class TestFreezeContract:
    def test_pre_align_only_adapter_changes(self):
        bundle = tiny_bundle()
        corpus = tiny_corpus(bundle)
        before = group_hashes(bundle)
        plan = TrainPlan(stage="pre_align", epochs=2, batch_size=4, seed=1)
        result = train(plan, corpus, bundle)
        after = group_hashes(bundle)
        assert after["encoder"] == before["encoder"]
        assert after["lm"] == before["lm"]
        assert after["adapter"] != before["adapter"]
        assert len(result.log) == 2 * math.ceil(len(corpus) / 4)

    def test_sft_changes_adapter_and_lora_only(self):
        bundle = tiny_bundle()
        corpus = tiny_corpus(bundle)
        before = group_hashes(bundle)
        plan = TrainPlan(stage="sft", epochs=1, batch_size=4, lora_rank=128,
                         lora_alpha=256, seed=1)
        train(plan, corpus, bundle)
        after = group_hashes(bundle)
        assert after["encoder"] == before["encoder"]
        assert after["lm"] == before["lm"]
        assert after["adapter"] != before["adapter"]
        assert "lora" in after  # created by the stage

    def test_default_rates_match_recipe(self):
        pre = TrainPlan(stage="pre_align")
        sft = TrainPlan(stage="sft")
        assert pre.adapter_lr == 2e-4
        assert sft.adapter_lr == 2e-3
        assert sft.lm_lr == 2e-4
        assert pre.epochs == 3 and pre.batch_size == 16 and pre.grad_accum == 2

    def test_log_carries_both_group_rates(self):
        bundle = tiny_bundle()
        corpus = tiny_corpus(bundle)
        plan = TrainPlan(stage="sft", epochs=1, batch_size=4, lora_rank=2, lora_alpha=4, seed=0)
        result = train(plan, corpus, bundle)
        first = result.log[0]
        assert first["lr_adapter"] == pytest.approx(2e-3)
        assert first["lr_lm"] == pytest.approx(2e-4)
        assert first["stage"] == "sft"


class TestDeterminism:
    def test_bit_identical_checkpoints(self, tmp_path):
        outs = []
        for run in range(2):
            bundle = tiny_bundle(seed=5)
            corpus = tiny_corpus(bundle)
            plan = TrainPlan(stage="sft", epochs=2, batch_size=4, lora_rank=4,
                             lora_alpha=8, seed=11)
            train(plan, corpus, bundle)
            path = tmp_path / f"run{run}.bin"
            save_bundle(bundle, path)
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_seed_changes_trajectory(self):
        losses = []
        for seed in (1, 2):
            bundle = tiny_bundle(seed=5)
            corpus = tiny_corpus(bundle)
            plan = TrainPlan(stage="pre_align", epochs=2, batch_size=2, seed=seed)
            losses.append(train(plan, corpus, bundle).losses)
        assert losses[0] != losses[1]


class TestTrainLoop:
    def test_cosine_schedule_decays_to_zero(self):
        bundle = tiny_bundle()
        corpus = tiny_corpus(bundle)
        plan = TrainPlan(stage="pre_align", epochs=8, batch_size=6, grad_accum=1, seed=0)
        result = train(plan, corpus, bundle)
        lrs = [e["lr_adapter"] for e in result.log]
        assert lrs[0] == pytest.approx(2e-4)
        assert lrs[-1] < lrs[0] * 0.1
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_max_steps_caps_micro_steps(self):
        bundle = tiny_bundle()
        corpus = tiny_corpus(bundle)
        plan = TrainPlan(stage="pre_align", epochs=50, batch_size=2, max_steps=7, seed=0)
        result = train(plan, corpus, bundle)
        assert len(result.log) == 7

    def test_empty_corpus_rejected(self):
        with pytest.raises(UsageError):
            train(TrainPlan(stage="pre_align"), [], tiny_bundle())

    def test_divergence_raises_with_step(self):
        bundle = tiny_bundle()
        corpus = tiny_corpus(bundle)
        bundle.adapter.linear1_w.data[0, 0] = np.nan
        with pytest.raises(DivergenceError) as err:
            train(TrainPlan(stage="pre_align", epochs=1, batch_size=4, seed=0), corpus, bundle)
        assert err.value.step == 0

    def test_loss_decreases_on_overfit_window(self):
        bundle = tiny_bundle()
        corpus = tiny_corpus(bundle, n=4)
        plan = TrainPlan(stage="sft", epochs=200, batch_size=4, grad_accum=1,
                         lr_adapter=5e-3, lr_lm=2e-3, lora_rank=16, lora_alpha=32, seed=3)
        result = train(plan, corpus, bundle)
        losses = result.losses
        first, last = np.mean(losses[:10]), np.mean(losses[-10:])
        assert last < first * 0.7

    def test_unknown_stage_rejected(self):
        with pytest.raises(UsageError):
            TrainPlan(stage="warmup")

    def test_mlp_adapter_bundle_trains(self):
        bundle = init_bundle(ENC, ADA, LMC, seed=2, adapter_kind="mlp")
        corpus = tiny_corpus(bundle)
        before = group_hashes(bundle)
        train(TrainPlan(stage="pre_align", epochs=1, batch_size=4, seed=0), corpus, bundle)
        after = group_hashes(bundle)
        assert after["mlp_adapter"] != before["mlp_adapter"]
        assert after["lm"] == before["lm"]
        assert bundle.n_visual == ENC.tokens
