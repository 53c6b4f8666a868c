import copy

import numpy as np
import pytest

from invsen import numkit
from invsen.datagen import DataGenConfig, Dataset, generate
from invsen.debias import (
    BiasHeads,
    LossWeights,
    bias_posterior,
    cross_entropy_grad_logits,
    entropy_confusion_grad_logits,
    head_parameter_arrays,
)
from invsen.errors import CheckpointError, ConfigError, TrainingDiverged
from invsen.numkit import adam_step, mlp_backward, normalize_rows
from invsen.sennet import SEModel, se_gradient_arrays, se_loss, se_parameter_arrays
from invsen.trainer import (
    TrainConfig,
    TrainState,
    epoch_batches,
    fit,
    init_state,
    load_checkpoint,
    resume,
    save_checkpoint,
    train_step,
)


def tiny_config(**kw):
    base = dict(epochs=3, batch_size=16, lr_main=1e-3, lr_bias=1e-4,
                weights=LossWeights(gamma=20.0, delta=0.9, lam=0.0, mu=1.0),
                seed=11, hidden=(10, 8), embed_dim=6, bias_hidden=(8, 6),
                beta0=0.005)
    base.update(kw)
    return TrainConfig(**base)


def toy_dataset(n_per=20, k=2, d=10, r=2, seed=5, bias_strength=1.0, e=0.1):
    cfg = DataGenConfig(k_subspaces=k, ambient_dim=d, subspace_rank=r,
                        n_per_cluster=n_per, noise_sigma=0.01,
                        bias_strength=bias_strength, bias_flip_e=e, seed=seed)
    return generate(cfg)


def clone_state(state: TrainState) -> TrainState:
    model = SEModel(key_net=numkit.clone_mlp(state.model.key_net),
                    query_net=numkit.clone_mlp(state.model.query_net),
                    embed_dim=state.model.embed_dim,
                    beta_raw=state.model.beta_raw.copy(),
                    alpha=state.model.alpha.copy(),
                    alpha_learnable=state.model.alpha_learnable,
                    swap_roles=state.model.swap_roles)
    heads = BiasHeads(g=numkit.clone_mlp(state.heads.g),
                      g_prime=numkit.clone_mlp(state.heads.g_prime),
                      n_bias_classes=state.heads.n_bias_classes)
    def clone_opt(o):
        out = copy.copy(o)
        out.m = [m.copy() for m in o.m]
        out.v = [v.copy() for v in o.v]
        return out
    return TrainState(config=state.config, model=model, heads=heads,
                      opt_main=clone_opt(state.opt_main),
                      opt_bias=clone_opt(state.opt_bias),
                      epoch=state.epoch, history=list(state.history),
                      rng=numkit.restore_rng(numkit.rng_state(state.rng)))


def params_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


class TestTrainStep:
    def test_lambda_zero_feature_update_is_pure_senet(self):
        ds = toy_dataset()
        x = normalize_rows(ds.X)[:16]
        b = ds.b[:16]
        cfg = tiny_config()
        state = init_state(cfg, x.shape[1])
        twin = clone_state(state)

        train_step(state, x, b, cfg.weights)

        # straight-line pure-SE step on the twin: ignore the heads entirely
        se = se_loss(twin.model, x, cfg.weights.gamma, cfg.weights.delta)
        adam_step(twin.opt_main, se_parameter_arrays(twin.model),
                  se_gradient_arrays(twin.model, se.grad_key, se.grad_query,
                                     se.grad_beta_raw, se.grad_alpha))
        assert params_equal(se_parameter_arrays(state.model),
                            se_parameter_arrays(twin.model))
        # the heads did move, on cross-entropy
        assert state.opt_bias.t == 1

    def test_step_matches_straightline_composition(self):
        # full min-max step recomputed by composing the primitives by hand
        ds = toy_dataset()
        x = normalize_rows(ds.X)[:4]
        b = ds.b[:4]
        w = LossWeights(gamma=20.0, delta=0.9, lam=0.8, mu=1.3)
        cfg = tiny_config(weights=w)
        state = init_state(cfg, x.shape[1])
        twin = clone_state(state)

        train_step(state, x, b, w)

        se = se_loss(twin.model, x, w.gamma, w.delta)
        p_key, cache_g = bias_posterior(twin.heads.g, se.key_out, "train")
        p_query, cache_gp = bias_posterior(twin.heads.g_prime, se.query_out, "train")
        g_grads, ce_u = mlp_backward(twin.heads.g, cache_g,
                                     cross_entropy_grad_logits(p_key, b))
        gp_grads, ce_v = mlp_backward(twin.heads.g_prime, cache_gp,
                                      cross_entropy_grad_logits(p_query, b))
        _, conf_u = mlp_backward(twin.heads.g, cache_g,
                                 entropy_confusion_grad_logits(p_key))
        _, conf_v = mlp_backward(twin.heads.g_prime, cache_gp,
                                 entropy_confusion_grad_logits(p_query))
        gk, _ = mlp_backward(twin.model.key_net, se.key_cache,
                             se.grad_key_out + w.lam * conf_u - w.lam * w.mu * ce_u)
        gq, _ = mlp_backward(twin.model.query_net, se.query_cache,
                             se.grad_query_out + w.lam * conf_v - w.lam * w.mu * ce_v)
        adam_step(twin.opt_bias, head_parameter_arrays(twin.heads),
                  numkit.mlp_grad_arrays(g_grads) + numkit.mlp_grad_arrays(gp_grads))
        adam_step(twin.opt_main, se_parameter_arrays(twin.model),
                  se_gradient_arrays(twin.model, gk, gq,
                                     se.grad_beta_raw, se.grad_alpha))

        assert params_equal(se_parameter_arrays(state.model),
                            se_parameter_arrays(twin.model))
        assert params_equal(head_parameter_arrays(state.heads),
                            head_parameter_arrays(twin.heads))

    def test_reversal_sign_is_exactly_minus_lambda_mu(self):
        # the CE contribution to the key-net gradient equals
        # -lam*mu times the CE gradient backpropagated through the head
        ds = toy_dataset()
        x = normalize_rows(ds.X)[:8]
        b = ds.b[:8]
        cfg = tiny_config()
        state = init_state(cfg, x.shape[1])
        lam, mu = 0.7, 1.9

        se = se_loss(clone_state(state).model, x, 20.0, 0.9)
        heads = clone_state(state).heads
        p_key, cache_g = bias_posterior(heads.g, se.key_out, "train")
        _, ce_u = mlp_backward(heads.g, cache_g,
                               cross_entropy_grad_logits(p_key, b))
        _, conf_u = mlp_backward(heads.g, cache_g,
                                 entropy_confusion_grad_logits(p_key))
        model = clone_state(state).model
        with_ce, _ = mlp_backward(model.key_net, se.key_cache,
                                  se.grad_key_out + lam * conf_u - lam * mu * ce_u)
        without_ce, _ = mlp_backward(model.key_net, se.key_cache,
                                     se.grad_key_out + lam * conf_u)
        reversed_only, _ = mlp_backward(model.key_net, se.key_cache,
                                        -lam * mu * ce_u)
        for a, c, r in zip(numkit.mlp_grad_arrays(with_ce),
                           numkit.mlp_grad_arrays(without_ce),
                           numkit.mlp_grad_arrays(reversed_only)):
            assert np.allclose(a - c, r, atol=1e-12)

    def test_optimizer_isolation(self):
        state = init_state(tiny_config(), 10)
        feature_ids = {id(a) for a in se_parameter_arrays(state.model)}
        head_ids = {id(a) for a in head_parameter_arrays(state.heads)}
        assert feature_ids.isdisjoint(head_ids)
        assert len(state.opt_main.m) == len(feature_ids)
        assert len(state.opt_bias.m) == len(head_ids)

    def test_missing_bias_labels_with_lam(self):
        cfg = tiny_config(weights=LossWeights(gamma=20.0, delta=0.9, lam=1.0))
        state = init_state(cfg, 10)
        with pytest.raises(ConfigError):
            train_step(state, np.ones((4, 10)), None, cfg.weights)

    def test_divergence_guard(self):
        cfg = tiny_config(weights=LossWeights(gamma=1e7, delta=0.9, lam=0.0))
        ds = toy_dataset()
        with pytest.raises(TrainingDiverged) as err:
            fit(cfg, ds)
        assert "total_report" in str(err.value)
        assert err.value.report


class TestEpochBatches:
    def test_pure_function_of_seed_and_epoch(self):
        a = epoch_batches(50, 16, seed=3, epoch=4)
        b = epoch_batches(50, 16, seed=3, epoch=4)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        c = epoch_batches(50, 16, seed=3, epoch=5)
        assert not np.array_equal(a[0], c[0])

    def test_partition_without_replacement(self):
        batches = epoch_batches(50, 16, seed=0, epoch=1)
        flat = np.concatenate(batches)
        assert sorted(flat.tolist()) == list(range(50))

    def test_singleton_tail_dropped(self):
        batches = epoch_batches(17, 4, seed=0, epoch=1)
        assert [len(b) for b in batches] == [4, 4, 4, 4]


class TestFit:
    def test_zero_epochs(self):
        state = fit(tiny_config(epochs=0), toy_dataset())
        assert state.epoch == 0 and state.history == []

    def test_seeded_runs_identical(self):
        ds = toy_dataset()
        a = fit(tiny_config(), ds)
        b = fit(tiny_config(), ds)
        assert params_equal(se_parameter_arrays(a.model),
                            se_parameter_arrays(b.model))
        assert a.history == b.history

    def test_history_one_record_per_epoch(self):
        state = fit(tiny_config(epochs=4), toy_dataset())
        assert [r["epoch"] for r in state.history] == [1, 2, 3, 4]
        for rec in state.history:
            for key in ("l_se", "l_ce_key", "l_conf_query", "bias_head_acc"):
                assert key in rec

    def test_smoke_loss_decreases_on_clean_data(self):
        # calibrated smoke threshold: 60 epochs on easy 2-subspace data
        # cuts the self-expression loss to well under half its start
        ds = toy_dataset(n_per=30, bias_strength=0.0, e=0.0)
        cfg = tiny_config(epochs=60, batch_size=32,
                          weights=LossWeights(gamma=20.0, delta=0.9, lam=0.0))
        state = fit(cfg, ds)
        assert state.history[-1]["l_se"] < 0.5 * state.history[0]["l_se"]

    def test_lam_zero_trajectory_equals_debias_free_build(self):
        # same seed, heads disabled entirely: feature params must agree
        # bit for bit with the lam=0 run
        ds = toy_dataset()
        cfg = tiny_config(epochs=3)
        full = fit(cfg, ds)

        state = init_state(cfg, ds.X.shape[1])
        x = normalize_rows(ds.X)
        for epoch in range(1, cfg.epochs + 1):
            for idx in epoch_batches(x.shape[0], cfg.batch_size, cfg.seed, epoch):
                se = se_loss(state.model, x[idx], cfg.weights.gamma,
                             cfg.weights.delta)
                adam_step(state.opt_main, se_parameter_arrays(state.model),
                          se_gradient_arrays(state.model, se.grad_key,
                                             se.grad_query, se.grad_beta_raw,
                                             se.grad_alpha))
        assert params_equal(se_parameter_arrays(full.model),
                            se_parameter_arrays(state.model))

    def test_lam_requires_bias_labels(self):
        ds = toy_dataset()
        ds_nob = Dataset(X=ds.X, s=ds.s, b=None)
        cfg = tiny_config(weights=LossWeights(gamma=20.0, delta=0.9, lam=1.0))
        with pytest.raises(ConfigError):
            fit(cfg, ds_nob)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=1, batch_size=1)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=1, lr_main=0.0)


class TestCheckpoints:
    def test_round_trip_zero_ulp(self, tmp_path):
        state = fit(tiny_config(epochs=2,
                                weights=LossWeights(gamma=20.0, delta=0.9,
                                                    lam=0.5, mu=1.0)),
                    toy_dataset())
        path = str(tmp_path / "ck.invsen")
        save_checkpoint(state, path)
        back = load_checkpoint(path)
        assert params_equal(se_parameter_arrays(state.model),
                            se_parameter_arrays(back.model))
        assert params_equal(head_parameter_arrays(state.heads),
                            head_parameter_arrays(back.heads))
        assert params_equal(state.opt_main.m + state.opt_main.v,
                            back.opt_main.m + back.opt_main.v)
        assert back.opt_main.t == state.opt_main.t
        assert back.history == state.history
        assert back.config == state.config
        # saving the restored state reproduces the file byte for byte
        path2 = str(tmp_path / "ck2.invsen")
        save_checkpoint(back, path2)
        assert open(path, "rb").read() == open(path2, "rb").read()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.invsen"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(str(path))

    def test_truncated_payload(self, tmp_path):
        state = fit(tiny_config(epochs=1), toy_dataset())
        path = str(tmp_path / "ck.invsen")
        save_checkpoint(state, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_resume_equals_uninterrupted(self, tmp_path):
        ds = toy_dataset()
        w = LossWeights(gamma=20.0, delta=0.9, lam=0.5, mu=1.0)
        full = fit(tiny_config(epochs=6, weights=w), ds)

        half = fit(tiny_config(epochs=3, weights=w), ds)
        path = str(tmp_path / "half.invsen")
        save_checkpoint(half, path)
        resumed = resume(load_checkpoint(path), ds, epochs=6)

        assert resumed.epoch == 6
        assert params_equal(se_parameter_arrays(full.model),
                            se_parameter_arrays(resumed.model))
        assert params_equal(head_parameter_arrays(full.heads),
                            head_parameter_arrays(resumed.heads))
        assert full.history == resumed.history
