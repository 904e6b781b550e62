"""Training loop: configs, determinism, loss assembly, checkpoints."""

import dataclasses
import json

import numpy as np
import pytest

from balign.train import (ExperimentConfig, Trainer, config_from_dict,
                          load_trainer, run_experiment, write_result_json)


def tiny_cfg(tiny_dataset_dir, **kw):
    base = dict(data_dir=tiny_dataset_dir, method="stn-tps-2", lam=3.0, epochs=2,
                batch_size=8, lr=0.05, embedding_dim=8, rec_channels=(4, 8),
                loc_channels=(2, 4), seed=0)
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_validation_errors(self, tiny_dataset_dir):
        with pytest.raises(ValueError):
            tiny_cfg(tiny_dataset_dir, lam=-1.0).validate()
        with pytest.raises(ValueError):
            tiny_cfg(tiny_dataset_dir, method="affine2d", lam=3.0).validate()
        with pytest.raises(ValueError):
            tiny_cfg(tiny_dataset_dir, template_mode="frozen").validate()
        with pytest.raises(ValueError):
            tiny_cfg(tiny_dataset_dir, template_mode="fixed-from-learned").validate()
        with pytest.raises(ValueError):
            tiny_cfg(tiny_dataset_dir, weights_mode="off").validate()
        with pytest.raises(ValueError):
            tiny_cfg(tiny_dataset_dir, weights_mode="fixed", weights_value=1.0).validate()
        with pytest.raises(ValueError):
            tiny_cfg(tiny_dataset_dir, epochs=-1).validate()
        with pytest.raises(ValueError):
            tiny_cfg(tiny_dataset_dir, batch_size=1).validate()

    def test_method_resolution_uses_grid_size(self, tiny_dataset_dir):
        cfg = tiny_cfg(tiny_dataset_dir, method="stn-tps", grid_size=8)
        assert cfg.resolved_method().cli_name == "stn-tps-8"
        assert tiny_cfg(tiny_dataset_dir).resolved_method().cli_name == "stn-tps-2"

    def test_config_dict_round_trip(self, tiny_dataset_dir):
        cfg = tiny_cfg(tiny_dataset_dir, method="stn-proj", lam=0.0)
        from balign.train import _config_dict
        assert config_from_dict(_config_dict(cfg)) == cfg


class TestTrainerSetup:
    def test_template_starts_at_fixed_dense_template(self, tiny_dataset_dir):
        tr = Trainer(tiny_cfg(tiny_dataset_dir))
        assert np.array_equal(tr.template.data, tr.template_dense_fixed.points)
        assert tr.template.requires_grad

    def test_alignment_state_frozen_at_lambda_zero(self, tiny_dataset_dir):
        tr = Trainer(tiny_cfg(tiny_dataset_dir, lam=0.0))
        assert not tr.template.requires_grad
        assert not tr.weights.learnable
        params = tr.parameters()
        assert tr.template not in params
        assert tr.weights.raw not in params

    def test_fixed_weights_mode(self, tiny_dataset_dir):
        tr = Trainer(tiny_cfg(tiny_dataset_dir, weights_mode="fixed", weights_value=0.5))
        np.testing.assert_allclose(tr.weights.values(), 0.5)
        assert not tr.weights.learnable

    def test_non_stn_methods_have_no_locnet(self, tiny_dataset_dir):
        tr = Trainer(tiny_cfg(tiny_dataset_dir, method="affine2d", lam=0.0))
        assert tr.locnet is None and tr.warper is None
        assert tr.fixed_grids is not None

    def test_full_align_deformed_points_equal_template(self, tiny_dataset_dir):
        tr = Trainer(tiny_cfg(tiny_dataset_dir, method="full-align", lam=0.0))
        for row in tr.deformed_points:
            assert np.array_equal(row, tr.template_dense_fixed.points)


class TestTraining:
    def test_two_runs_are_byte_identical(self, tiny_dataset_dir, tmp_path):
        results = []
        for name in ("a", "b"):
            res = run_experiment(tiny_cfg(tiny_dataset_dir), log=None)
            path = tmp_path / f"{name}.json"
            write_result_json(path, res)
            results.append(path.read_bytes())
        assert results[0] == results[1]

    def test_align_term_logging_does_not_change_training(self, tiny_dataset_dir):
        on = run_experiment(tiny_cfg(tiny_dataset_dir, lam=0.0, log_align_terms=True),
                            log=None)
        off = run_experiment(tiny_cfg(tiny_dataset_dir, lam=0.0, log_align_terms=False),
                             log=None)
        assert on.rank1_overall == off.rank1_overall
        assert on.anme == off.anme
        for ra, rb in zip(on.epoch_reports, off.epoch_reports):
            assert ra.l_fr == rb.l_fr
        # The report-only path did measure alignment terms.
        assert on.epoch_reports[-1].l_lmk > 0.0
        assert off.epoch_reports[-1].l_lmk == 0.0

    def test_loss_report_assembly(self, tiny_dataset_dir):
        res = run_experiment(tiny_cfg(tiny_dataset_dir, lam=2.0), log=None)
        for rep in res.epoch_reports:
            assert rep.lam == 2.0
            assert rep.total == pytest.approx(
                rep.l_fr + 2.0 * (rep.l_lmk + rep.l_reg), rel=1e-12)

    def test_zero_epochs_evaluates_untrained_model(self, tiny_dataset_dir):
        res = run_experiment(tiny_cfg(tiny_dataset_dir, epochs=0), log=None)
        assert res.epoch_reports == []
        assert 0.0 <= res.rank1_overall <= 1.0
        assert res.anme > 0.0

    def test_seeds_change_outcomes(self, tiny_dataset_dir):
        a = run_experiment(tiny_cfg(tiny_dataset_dir, seed=0), log=None)
        b = run_experiment(tiny_cfg(tiny_dataset_dir, seed=1), log=None)
        assert (a.epoch_reports[0].l_fr != b.epoch_reports[0].l_fr
                or a.anme != b.anme)

    def test_feature_map_application_runs(self, tiny_dataset_dir):
        res = run_experiment(tiny_cfg(tiny_dataset_dir, apply_at="fmap", epochs=1),
                             log=None)
        assert 0.0 <= res.rank1_overall <= 1.0

    def test_result_json_has_nine_digit_floats(self, tiny_dataset_dir, tmp_path):
        res = run_experiment(tiny_cfg(tiny_dataset_dir, epochs=1), log=None)
        path = tmp_path / "r.json"
        write_result_json(path, res)
        blob = json.loads(path.read_text())
        assert blob["rank1_overall"] == float(f"{res.rank1_overall:.9g}")
        assert "wall_clock" not in blob


class TestCheckpointing:
    def test_round_trip_preserves_evaluation(self, tiny_dataset_dir, tmp_path):
        trainer = Trainer(tiny_cfg(tiny_dataset_dir, epochs=1))
        trainer.train(log=None)
        rank1, buckets, anme_val = trainer.evaluate()
        path = tmp_path / "ckpt.bin"
        trainer.save_checkpoint(path)

        restored = load_trainer(path)
        r_rank1, r_buckets, r_anme = restored.evaluate()
        assert r_rank1 == pytest.approx(rank1, abs=0.051)
        assert r_anme == pytest.approx(anme_val, abs=1e-4)
        assert set(r_buckets) == set(buckets)

    def test_restore_rejects_missing_or_misshaped_tensors(self, tiny_dataset_dir, tmp_path):
        trainer = Trainer(tiny_cfg(tiny_dataset_dir, epochs=0))
        path = tmp_path / "ckpt.bin"
        trainer.save_checkpoint(path)
        from balign.nets import load_checkpoint
        _, tensors = load_checkpoint(path)

        fresh = Trainer(tiny_cfg(tiny_dataset_dir, epochs=0))
        incomplete = dict(tensors)
        incomplete.pop("class_weights")
        with pytest.raises(KeyError):
            fresh.restore(incomplete)
        bad = dict(tensors, class_weights=np.zeros((1, 1)))
        with pytest.raises(ValueError):
            fresh.restore(bad)

    def test_load_trainer_can_repoint_data(self, tiny_dataset_dir, tmp_path):
        trainer = Trainer(tiny_cfg(tiny_dataset_dir, epochs=0))
        path = tmp_path / "ckpt.bin"
        trainer.save_checkpoint(path)
        restored = load_trainer(path, data_dir=tiny_dataset_dir)
        assert restored.cfg.data_dir == tiny_dataset_dir
