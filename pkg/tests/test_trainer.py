import json

import numpy as np
import pytest

from fewshot_rlvr.checkpoint import IntegrityError, load_checkpoint
from fewshot_rlvr.policy import PolicyConfig, ToyVLM
from fewshot_rlvr.pretrain import PretrainConfig, pretrain_base
from fewshot_rlvr.taskgen import FewShotSpec, duplicate_to_batch, render_pool, sample_fewshot
from fewshot_rlvr.trainer import (
    MetricsRow,
    TrainConfig,
    TrainingHalted,
    checkpoint_name,
    policy_from_checkpoint,
    read_metrics,
    resume,
    train,
)

SMALL = PolicyConfig(embed_dim=16, num_layers=1, num_heads=2, max_seq_len=40, seed=1)


@pytest.fixture(scope="module")
def base():
    m = ToyVLM(SMALL)
    pool = render_pool(60, 5, prefix="pt")
    pretrain_base(m, PretrainConfig(steps=60, batch_rows=32, lr=1e-2, look_prob=0.3, bare_prob=0.2), pool=pool)
    return m


@pytest.fixture(scope="module")
def dataset():
    pool = render_pool(30, 2)
    return duplicate_to_batch(sample_fewshot(pool, FewShotSpec(1, 2, 1, seed=0)), 8)


def config(**kw):
    base = dict(
        batch_size=8, group_size=4, lr=3e-3, max_new_tokens=12, total_steps=6, checkpoint_every=2, log_wall_time=False
    )
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_paper_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.group_size, c.train_temperature, c.beta, c.clip_eps) == (128, 4, 0.9, 0.001, 0.2)
        assert (c.total_steps, c.checkpoint_every) == (1000, 100)

    @pytest.mark.parametrize("kw", [{"grad_accum": 9}, {"grad_accum": 3}, {"group_size": 1}, {"lr": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        c = TrainConfig(beta=0.04, seed=3)
        assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": 1})


class TestTrain:
    def test_zero_steps(self, tmp_path, base, dataset):
        res = train(config(total_steps=0), dataset, tmp_path, base)
        assert [p.name for p in res.checkpoints] == [checkpoint_name(0)]
        assert (tmp_path / "metrics.csv").read_text() == ",".join(MetricsRow.header()) + "\n"

    def test_cadence_and_bounds(self, tmp_path, base, dataset):
        res = train(config(total_steps=5, checkpoint_every=2), dataset, tmp_path, base)
        assert [load_checkpoint(p).step for p in res.checkpoints] == [0, 2, 4]
        rows = read_metrics(tmp_path / "metrics.csv")
        assert [r.step for r in rows] == [1, 2, 3, 4, 5]
        for r in rows:
            assert 0 <= r.mean_format_reward <= 1
            assert r.mean_total_reward <= 2.0
            assert r.mean_kl >= -1e-10
        # the first update starts from the reference itself
        assert rows[0].mean_kl == 0.0 and rows[-1].mean_kl > 0

    def test_reference_is_frozen_base(self, tmp_path, base, dataset):
        res = train(config(total_steps=2), dataset, tmp_path, base)
        ref = policy_from_checkpoint(res.checkpoints[-1], "ref")
        for k, v in base.state_dict().items():
            np.testing.assert_array_equal(ref.params[k].data, v)
        assert any(not np.array_equal(res.policy.params[k].data, v) for k, v in base.state_dict().items())

    def test_bitwise_determinism(self, tmp_path, base, dataset):
        a = train(config(), dataset, tmp_path / "a", base)
        b = train(config(), dataset, tmp_path / "b", base)
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
        assert a.checkpoints[-1].read_bytes() == b.checkpoints[-1].read_bytes()

    def test_seed_changes_trajectory(self, tmp_path, base, dataset):
        train(config(seed=0), dataset, tmp_path / "a", base)
        train(config(seed=1), dataset, tmp_path / "b", base)
        assert (tmp_path / "a/metrics.csv").read_bytes() != (tmp_path / "b/metrics.csv").read_bytes()

    def test_resume_equivalence(self, tmp_path, base, dataset):
        full = train(config(total_steps=6, checkpoint_every=3), dataset, tmp_path / "full", base)
        train(config(total_steps=3, checkpoint_every=3), dataset, tmp_path / "half", base)
        resumed = resume(tmp_path / "half" / checkpoint_name(3), config(total_steps=6, checkpoint_every=3), dataset, tmp_path / "half")
        assert (tmp_path / "full/metrics.csv").read_bytes() == (tmp_path / "half/metrics.csv").read_bytes()
        assert full.checkpoints[-1].read_bytes() == resumed.checkpoints[-1].read_bytes()

    def test_resume_with_new_beta_records_provenance(self, tmp_path, base, dataset):
        train(config(total_steps=2), dataset, tmp_path, base)
        res = resume(tmp_path / checkpoint_name(2), config(total_steps=4, beta=0.04), dataset, tmp_path)
        meta = load_checkpoint(res.checkpoints[-1]).meta
        assert meta["provenance"][0]["changed"]["beta"] == [0.001, 0.04]
        assert meta["provenance"][0]["resumed_at"] == 2

    def test_resume_corrupted(self, tmp_path, base, dataset):
        train(config(total_steps=2), dataset, tmp_path, base)
        p = tmp_path / checkpoint_name(2)
        data = bytearray(p.read_bytes())
        data[len(data) // 2] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(IntegrityError):
            resume(p, None, dataset, tmp_path)

    def test_dataset_size_must_match_batch(self, tmp_path, base, dataset):
        with pytest.raises(ValueError):
            train(config(batch_size=16), dataset, tmp_path, base)

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_non_finite_halts_with_dump(self, tmp_path, base, dataset):
        bad = base.copy()
        bad.params["layer0.mlp.b2"].data = np.full_like(bad.params["layer0.mlp.b2"].data, np.inf)
        with pytest.raises(TrainingHalted) as info:
            train(config(), dataset, tmp_path, bad)
        assert info.value.checkpoint.exists()
        diag = json.loads((tmp_path / "halt_diagnostics.json").read_text())
        assert diag["step"] == 1

    def test_grad_accum_close_to_single_pass(self, tmp_path, base, dataset):
        a = train(config(total_steps=1), dataset, tmp_path / "a", base)
        b = train(config(total_steps=1, grad_accum=4), dataset, tmp_path / "b", base)
        for k, p in a.policy.params.items():
            np.testing.assert_allclose(b.policy.params[k].data, p.data, rtol=0, atol=1e-10)
