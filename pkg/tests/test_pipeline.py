import numpy as np
import pytest

from novaug.checkpoint import load_checkpoint, save_checkpoint
from novaug.config import ExperimentConfig
from novaug.data import make_synthetic, SyntheticSpec
from novaug.layers import Linear
from novaug.losses import EmbeddingBatch
from novaug.ot import energy_distance
from novaug.pipeline import (
    TrainingDiverged,
    build_state,
    count_parameters,
    embed_dataset,
    enter_stage,
    joint_step,
    load_datasets,
    pretrain_embedder,
    pretrain_generator,
    run_experiment,
    run_joint,
    write_metrics_csv,
)
from novaug.tensor import Tensor, backward, no_grad


def tiny_config(**overrides):
    values = {
        "method": "vanilla",
        "seed": 3,
        "data.train_classes": 4,
        "data.test_classes": 4,
        "data.samples_per_class": 12,
        "data.input_dim": 12,
        "data.cluster_spread": 0.08,
        "model.embedding_dim": 8,
        "model.trunk_hidden": (16,),
        "train.batch_size": 12,
        "train.pretrain_f_steps": 60,
        "train.pretrain_g_steps": 40,
        "train.joint_steps": 40,
    }
    values.update(overrides)
    return ExperimentConfig.from_values(values)


def params_snapshot(state):
    arrays = [p.data.copy() for p in state.embedder.parameters()]
    arrays.append(state.bank.real.data.copy())
    if state.bank.novel is not None:
        arrays.append(state.bank.novel.data.copy())
    if state.generator is not None:
        arrays.extend(p.data.copy() for p in state.generator.parameters())
    return arrays


class TestPretrainEmbedder:
    def test_two_separated_classes_reach_perfect_train_recall(self):
        cfg = tiny_config(**{
            "data.train_classes": 2, "data.test_classes": 2,
            "data.samples_per_class": 20, "data.cluster_spread": 0.05,
            "data.min_angle_deg": 60.0, "train.pretrain_f_steps": 200,
        })
        train, _ = load_datasets(cfg)
        state = build_state(cfg, 2, train.dim)
        pretrain_embedder(state, train)
        emb = embed_dataset(state, train)
        # brute-force nearest neighbor, independent of the recall module
        vec = emb.vectors.data
        hits = 0
        for i in range(len(vec)):
            sims = vec @ vec[i]
            sims[i] = -np.inf
            hits += emb.labels[np.argmax(sims)] == emb.labels[i]
        assert hits == len(vec)

    def test_zero_steps_leaves_parameters_at_init(self):
        cfg = tiny_config(**{"train.pretrain_f_steps": 0})
        train, _ = load_datasets(cfg)
        state = build_state(cfg, 4, train.dim)
        before = params_snapshot(state)
        pretrain_embedder(state, train)
        for a, b in zip(before, params_snapshot(state)):
            np.testing.assert_array_equal(a, b)

    def test_same_seed_same_final_loss(self):
        cfg = tiny_config()
        train, _ = load_datasets(cfg)
        losses = []
        for _ in range(2):
            state = build_state(cfg, 4, train.dim)
            pretrain_embedder(state, train)
            losses.append(state.metric_rows[-1].total)
        assert losses[0] == losses[1]

    def test_nan_loss_aborts_with_diagnostic(self):
        cfg = tiny_config()
        train, _ = load_datasets(cfg)
        state = build_state(cfg, 4, train.dim)
        state.embedder.head.weight.data[0, 0] = np.nan
        with pytest.raises(TrainingDiverged, match="stage pretrain_f"):
            pretrain_embedder(state, train)

    def test_nan_gradient_refuses_optimizer_step(self):
        # relu masks NaN activations, so corrupt inputs surface as NaN
        # gradients rather than a NaN loss; the optimizer refuses the step
        from novaug.data import Dataset
        from novaug.optim import OptimizerFault

        cfg = tiny_config()
        train, _ = load_datasets(cfg)
        corrupted = train.features.copy()
        corrupted[:, 0] = np.nan
        bad = Dataset(corrupted, train.labels)
        state = build_state(cfg, 4, train.dim)
        with pytest.raises(OptimizerFault):
            pretrain_embedder(state, bad)


class TestPretrainGenerator:
    def test_embedder_frozen_and_conditioning_effective(self):
        cfg = tiny_config(method="l2a_nc", **{
            "novel.count": 8, "train.pretrain_g_steps": 500, "lambda_div": 1.0,
            "train.lr_pretrain_g": 1e-3, "ot.max_iterations": 60,
        })
        train, _ = load_datasets(cfg)
        state = build_state(cfg, 4, train.dim)
        pretrain_embedder(state, train)
        f_params = [p.data.copy() for p in state.embedder.parameters()]
        pretrain_generator(state, train)
        for a, p in zip(f_params, state.embedder.parameters()):
            np.testing.assert_array_equal(a, p.data)

        # class conditioning: intra-class similarity beats cross-class
        state.generator.eval()
        rng = np.random.default_rng(0)
        per_class = 64
        means = {}
        vectors = {}
        for label in state.generator.label_universe():
            noise = Tensor(rng.standard_normal((per_class, 16)))
            out = state.generator(np.full(per_class, label), noise)
            vectors[label] = out.data
            means[label] = out.data.mean(axis=0)
        for label, rows in vectors.items():
            sims = rows @ rows.T
            intra = sims[np.triu_indices(per_class, 1)].mean()
            cross = np.mean([
                (rows @ vectors[other].T).mean()
                for other in vectors if other != label
            ])
            assert intra > cross

        # noise sensitivity: distinct latents give distinct vectors
        noise = Tensor(rng.standard_normal((2, 16)))
        label = state.generator.first_label
        out = state.generator(np.array([label, label]), noise)
        assert out.data[0] @ out.data[1] < 1.0 - 1e-6

    def test_lambda_zero_never_evaluates_divergence(self):
        cfg = tiny_config(method="l2a_nc", **{"novel.count": 6, "lambda_div": 0.0})
        train, _ = load_datasets(cfg)
        state = build_state(cfg, 4, train.dim)
        pretrain_embedder(state, train)
        pretrain_generator(state, train)
        g_rows = [r for r in state.metric_rows if r.stage == "pretrain_g"]
        assert g_rows and all(r.j_div is None for r in g_rows)
        assert all(r.total == r.j_met for r in g_rows)

    def test_vanilla_has_no_generator_stage(self):
        cfg = tiny_config()
        train, _ = load_datasets(cfg)
        state = build_state(cfg, 4, train.dim)
        with pytest.raises(ValueError):
            pretrain_generator(state, train)


class TestJointStage:
    def test_reduction_to_vanilla_is_bit_identical(self):
        base = dict(**{
            "train.pretrain_f_steps": 30, "train.joint_steps": 100,
        })
        cfg_v = tiny_config(method="vanilla", **base)
        cfg_n = tiny_config(method="l2a_nc", lambda_div=0.0, **base,
                            **{"novel.count": 0, "novel.ratio": 0.0})
        train, _ = load_datasets(cfg_v)
        states = []
        for cfg in (cfg_v, cfg_n):
            state = build_state(cfg, 4, train.dim)
            pretrain_embedder(state, train)
            run_joint(state, train)
            states.append(state)
        assert states[1].generator is None
        for a, b in zip(params_snapshot(states[0]), params_snapshot(states[1])):
            np.testing.assert_array_equal(a, b)
        totals = [[r.total for r in s.metric_rows] for s in states]
        assert totals[0] == totals[1]

    def test_divergence_gradient_blocked_on_embedder(self):
        cfg = tiny_config(method="l2a_nc", **{"novel.count": 6})
        train, _ = load_datasets(cfg)
        state = build_state(cfg, 4, train.dim)
        features = train.features[:8]
        x = state.embedder(Tensor(features))
        rng = np.random.default_rng(1)
        labels = np.full(6, state.num_real_classes + 1)
        noise = Tensor(rng.standard_normal((6, 16)))
        synth = state.generator(labels, noise)
        jd = energy_distance(x, synth, cfg.sinkhorn_params(),
                             np.random.default_rng(2))
        backward(jd)
        for p in state.embedder.parameters():
            assert p.grad is None
        assert any(p.grad is not None for p in state.generator.parameters())

        # the divergence is genuinely sensitive to the real side: same split rng,
        # perturbed (and renormalized) real embeddings, different value
        with no_grad():
            from novaug.tensor import l2_normalize

            x2 = l2_normalize(Tensor(x.data + 0.05))
            jd2 = energy_distance(x2, Tensor(synth.data), cfg.sinkhorn_params(),
                                  np.random.default_rng(2))
        assert abs(jd2.item() - jd.item()) > 1e-6

    def test_bookkeeping_total_equals_components(self):
        cfg = tiny_config(method="l2a_nc",
                          **{"novel.count": 6, "ot.max_iterations": 40,
                             "train.pretrain_f_steps": 10,
                             "train.pretrain_g_steps": 10,
                             "train.joint_steps": 15})
        train, _ = load_datasets(cfg)
        state = build_state(cfg, 4, train.dim)
        pretrain_embedder(state, train)
        pretrain_generator(state, train)
        run_joint(state, train)
        lam = cfg["lambda_div"]
        for row in state.metric_rows:
            expected = row.j_met + (lam * row.j_div if row.j_div is not None else 0.0)
            assert abs(expected - row.total) <= 1e-10

    def test_joint_updates_all_four_groups(self):
        cfg = tiny_config(method="l2a_nc", **{"novel.count": 6,
                                              "train.pretrain_f_steps": 5,
                                              "train.pretrain_g_steps": 5,
                                              "ot.max_iterations": 40})
        train, _ = load_datasets(cfg)
        state = build_state(cfg, 4, train.dim)
        pretrain_embedder(state, train)
        pretrain_generator(state, train)
        before = params_snapshot(state)
        joint_step(state, train)
        after = params_snapshot(state)
        changed = [not np.array_equal(a, b) for a, b in zip(before, after)]
        assert all(changed)

    def test_ec_differs_from_nc_only_in_label_universe(self):
        cfg_ec = tiny_config(method="l2a_ec", **{"novel.count": 4})
        cfg_nc = tiny_config(method="l2a_nc", **{"novel.count": 4})
        train, _ = load_datasets(cfg_ec)
        ec = build_state(cfg_ec, 4, train.dim)
        nc = build_state(cfg_nc, 4, train.dim)
        assert list(ec.generator.label_universe()) == [1, 2, 3, 4]
        assert list(nc.generator.label_universe()) == [5, 6, 7, 8]
        assert ec.bank.novel is None and nc.bank.novel is not None
        ec_shapes = [p.data.shape for p in ec.generator.parameters()]
        nc_shapes = [p.data.shape for p in nc.generator.parameters()]
        assert ec_shapes == nc_shapes

    def test_ps_step_runs_and_trains(self):
        cfg = tiny_config(method="ps", **{"train.pretrain_f_steps": 30,
                                          "train.joint_steps": 30})
        train, _ = load_datasets(cfg)
        state = build_state(cfg, 4, train.dim)
        pretrain_embedder(state, train)
        run_joint(state, train)
        assert state.generator is None
        joint_rows = [r for r in state.metric_rows if r.stage == "joint"]
        assert len(joint_rows) == 30 and all(r.j_div is None for r in joint_rows)


class TestCountParameters:
    def test_linear_layer_count(self):
        layer = Linear(2, 3, np.random.default_rng(0))
        assert layer.weight.data.size + layer.bias.data.size == 9

    def test_vanilla_has_no_generator_parameters(self):
        cfg = tiny_config()
        state = build_state(cfg, 4, 12)
        counts = count_parameters(state)
        assert counts["generator"] == 0 and counts["proxies_novel"] == 0
        assert counts["overhead_pct"] == 0.0

    def test_hand_computed_architectures(self):
        # architecture 1: vanilla, input 12, trunk (16,), head 8, 4 proxies
        state = build_state(tiny_config(), 4, 12)
        counts = count_parameters(state)
        assert counts["trunk"] == 12 * 16 + 16
        assert counts["embedding_head"] == 16 * 8 + 8
        assert counts["proxies_real"] == 4 * 8
        assert counts["total"] == 208 + 136 + 32

        # architecture 2: l2a_nc with 6 novel classes, generator hidden 4*8=32;
        # pre-norm linears carry no bias
        state = build_state(tiny_config(method="l2a_nc", **{"novel.count": 6}), 4, 12)
        counts = count_parameters(state)
        gen = (16 * 32) + (32 * 32) + (32 * 32) + (32 * 8 + 8) + 3 * (2 * 6 * 32)
        assert counts["generator"] == gen
        assert counts["proxies_novel"] == 6 * 8
        assert counts["total"] == 208 + 136 + 32 + gen + 48

        # architecture 3: l2a_ec conditions on the 4 real classes instead
        state = build_state(tiny_config(method="l2a_ec", **{"novel.count": 6}), 4, 12)
        counts = count_parameters(state)
        gen = (16 * 32) + (32 * 32) + (32 * 32) + (32 * 8 + 8) + 3 * (2 * 4 * 32)
        assert counts["generator"] == gen and counts["proxies_novel"] == 0

    def test_generator_small_fraction_of_backbone_scaled_trunk(self):
        # paper-shaped proportion check by direct count; the training default
        # uses a deliberately small trunk, so the ratio is checked here at a
        # backbone-sized one
        cfg = ExperimentConfig.from_values({
            "method": "l2a_nc",
            "model.trunk_hidden": (1024, 2048),
            "model.embedding_dim": 32,
            "data.train_classes": 64,
        })
        state = build_state(cfg, 64, 64)
        counts = count_parameters(state)
        assert counts["overhead_pct"] < 10.0


class TestCheckpointing:
    def test_round_trip_is_bit_exact_and_resume_matches(self, tmp_path):
        cfg = tiny_config(method="l2a_nc",
                          **{"novel.count": 6, "train.pretrain_f_steps": 15,
                             "train.pretrain_g_steps": 10, "train.joint_steps": 6,
                             "ot.max_iterations": 40})
        train, _ = load_datasets(cfg)
        state = build_state(cfg, 4, train.dim)
        pretrain_embedder(state, train)
        pretrain_generator(state, train)
        for _ in range(3):
            joint_step(state, train)
        path = tmp_path / "checkpoint.bin"
        save_checkpoint(state, path)

        resumed = load_checkpoint(path)
        for a, b in zip(params_snapshot(state), params_snapshot(resumed)):
            np.testing.assert_array_equal(a, b)

        for _ in range(3):
            joint_step(state, train)
            joint_step(resumed, train)
        for a, b in zip(params_snapshot(state), params_snapshot(resumed)):
            np.testing.assert_array_equal(a, b)
        assert [r.as_csv() for r in state.metric_rows] == [
            r.as_csv() for r in resumed.metric_rows
        ]

    def test_uninterrupted_equals_save_load_continue(self, tmp_path):
        cfg = tiny_config(**{"train.pretrain_f_steps": 10, "train.joint_steps": 8})
        train, _ = load_datasets(cfg)

        straight = build_state(cfg, 4, train.dim)
        pretrain_embedder(straight, train)
        run_joint(straight, train)

        broken = build_state(cfg, 4, train.dim)
        pretrain_embedder(broken, train)
        for _ in range(4):
            joint_step(broken, train)
        path = tmp_path / "mid.bin"
        save_checkpoint(broken, path)
        resumed = load_checkpoint(path)
        run_joint(resumed, train)

        for a, b in zip(params_snapshot(straight), params_snapshot(resumed)):
            np.testing.assert_array_equal(a, b)


class TestRunExperiment:
    def test_vanilla_on_separable_data(self, tmp_path):
        cfg = tiny_config(**{
            "data.train_classes": 8, "data.test_classes": 8,
            "data.samples_per_class": 20, "data.input_dim": 16,
            "data.cluster_spread": 0.08,
            "train.pretrain_f_steps": 150, "train.joint_steps": 100,
            "train.batch_size": 16,
        })
        result = run_experiment(cfg, out_dir=tmp_path / "run")
        assert result.recalls[1] >= 0.9
        assert (tmp_path / "run" / "metrics.csv").exists()
        assert (tmp_path / "run" / "eval.csv").exists()
        assert (tmp_path / "run" / "checkpoint.bin").exists()
        echo = (tmp_path / "run" / "config.echo").read_text()
        assert echo == cfg.canonical_text()

    def test_rerun_writes_identical_metric_bytes(self, tmp_path):
        cfg = tiny_config(**{"train.pretrain_f_steps": 25, "train.joint_steps": 10})
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        path_a, path_b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(a, path_a)
        write_metrics_csv(b, path_b)
        assert path_a.read_bytes() == path_b.read_bytes()
        assert a.recalls == b.recalls

    def test_novel_ratio_in_config_echo(self):
        cfg = ExperimentConfig.from_values({
            "method": "l2a_nc", "data.train_classes": 64, "novel.ratio": 2.0,
        })
        assert cfg.novel_count(64) == 128
        assert "novel.ratio = 2" in cfg.canonical_text()

    def test_stage_row_counts(self):
        cfg = tiny_config(method="l2a_nc",
                          **{"novel.count": 6, "train.pretrain_f_steps": 8,
                             "train.pretrain_g_steps": 5, "train.joint_steps": 4,
                             "ot.max_iterations": 30})
        result = run_experiment(cfg)
        stages = [r.stage for r in result.metric_rows]
        assert stages.count("pretrain_f") == 8
        assert stages.count("pretrain_g") == 5
        assert stages.count("joint") == 4
