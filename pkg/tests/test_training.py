import numpy as np
import pytest
import torch
from PIL import Image

from buildingseg.errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    InputDomainError,
    ManifestError,
)
from buildingseg.manifest import DatasetManifest
from buildingseg.training import (
    Checkpoint,
    EpochRecord,
    TrainConfig,
    append_history_row,
    batch_objective,
    evaluate,
    evaluate_model,
    predict,
    read_history,
    seed_everything,
    train,
    write_history_header,
)
from buildingseg.unetpp import SegmentationOutput, build_model

from conftest import FIXTURE_TILE


def quick_config(**kwargs) -> TrainConfig:
    base = dict(variant="b0", epochs=1, batch_size=2, learning_rate=1e-3, seed=0)
    base.update(kwargs)
    return TrainConfig(**base)


def fresh_model(seed=0):
    seed_everything(seed)
    return build_model("b0", None)


class TestTrainConfig:
    def test_defaults_follow_conventions(self):
        config = TrainConfig()
        assert config.epochs == 100
        assert config.batch_size == 8
        assert config.learning_rate == 1e-4
        assert config.optimizer == "adam"
        assert config.loss == "dice"
        assert config.deep_supervision is True

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="adagrad")
        with pytest.raises(ConfigError):
            TrainConfig(loss="focal")

    def test_from_run_dict_maps_encoder(self):
        config = TrainConfig.from_run_dict({"encoder": "b2", "epochs": 3,
                                            "norm": "batch"})
        assert config.variant == "b2"
        assert config.epochs == 3


class TestHistoryCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "history.csv"
        write_history_header(path)
        records = [EpochRecord(1, 0.9, 0.95, 0.1, 0.05),
                   EpochRecord(2, 0.5, 0.6, 0.4, 0.3)]
        for record in records:
            append_history_row(path, record)
        loaded = read_history(path)
        assert loaded.records == records

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputDomainError):
            read_history(tmp_path / "none.csv")

    def test_bad_header(self, tmp_path):
        path = tmp_path / "history.csv"
        path.write_text("a,b\n")
        with pytest.raises(InputDomainError, match="line 1"):
            read_history(path)

    def test_corrupt_row_names_line(self, tmp_path):
        path = tmp_path / "history.csv"
        write_history_header(path)
        append_history_row(path, EpochRecord(1, 0.9, 0.9, 0.1, 0.1))
        with open(path, "a") as fh:
            fh.write("2,banana,0.5,0.5,0.5\n")
        with pytest.raises(InputDomainError, match="line 3"):
            read_history(path)


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        model = fresh_model()
        checkpoint = Checkpoint(
            state_dict={k: v.detach().clone()
                        for k, v in model.state_dict().items()},
            config={"encoder": "b0"}, best_val_iou=0.5, epoch=3,
        )
        path = tmp_path / "ckpt.pt"
        checkpoint.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.epoch == 3
        assert loaded.best_val_iou == 0.5
        assert loaded.config == {"encoder": "b0"}
        assert loaded.format_version == checkpoint.format_version
        for k in checkpoint.state_dict:
            assert torch.equal(loaded.state_dict[k], checkpoint.state_dict[k])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "absent.pt")

    def test_wrong_format_version(self, tmp_path):
        path = tmp_path / "old.pt"
        torch.save({"format_version": 99, "config": {}, "state_dict": {},
                    "best_val_iou": 0.0, "epoch": 1}, path)
        with pytest.raises(CheckpointError, match="format"):
            Checkpoint.load(path)


class TestBatchObjective:
    def test_uses_mean_of_heads_by_default(self):
        target = torch.zeros(1, 2, 8, 8)
        target[:, 0] = 1.0
        heads = [torch.full((1, 1, 8, 8), 0.2, requires_grad=True),
                 torch.full((1, 1, 8, 8), 0.8, requires_grad=True)]
        output = SegmentationOutput(probabilities=heads[-1], head_outputs=heads)
        loss = batch_objective(output, target, quick_config())
        assert loss.requires_grad

    def test_final_head_mode(self):
        target = torch.zeros(1, 2, 4, 4)
        target[:, 1] = 1.0
        final = torch.full((1, 1, 4, 4), 0.75)
        output = SegmentationOutput(
            probabilities=final,
            head_outputs=[torch.zeros(1, 1, 4, 4), final],
        )
        config = quick_config(loss_heads="final")
        from buildingseg.metrics import dice_loss
        expected = float(dice_loss(final, target[:, 1:2], smooth=config.smooth))
        assert float(batch_objective(output, target, config)) == pytest.approx(
            expected, abs=1e-7)

    def test_dice_bce_is_larger_than_dice(self):
        target = torch.zeros(1, 2, 4, 4)
        target[:, 1] = 1.0
        probs = torch.full((1, 1, 4, 4), 0.6)
        output = SegmentationOutput(probabilities=probs, head_outputs=[probs])
        dice_only = float(batch_objective(output, target, quick_config()))
        composite = float(batch_objective(output, target,
                                          quick_config(loss="dice+bce")))
        assert composite > dice_only


class TestTrain:
    def test_single_epoch_contract(self, toy_cache):
        _, manifest = toy_cache
        model = fresh_model()
        history, checkpoint = train(quick_config(), manifest, model)
        assert len(history.records) == 1
        assert history.records[0].epoch == 1
        assert checkpoint.epoch == 1
        assert checkpoint.best_val_iou == history.records[0].val_iou

    def test_best_checkpoint_is_earliest_argmax(self, toy_cache):
        _, manifest = toy_cache
        model = fresh_model()
        history, checkpoint = train(quick_config(epochs=3), manifest, model)
        ious = [r.val_iou for r in history.records]
        assert checkpoint.best_val_iou == max(ious)
        assert checkpoint.epoch == ious.index(max(ious)) + 1

    def test_losses_within_dice_range(self, toy_cache):
        _, manifest = toy_cache
        history, _ = train(quick_config(epochs=2), manifest, fresh_model())
        for record in history.records:
            assert 0.0 <= record.train_dice_loss <= 1.0
            assert 0.0 <= record.val_dice_loss <= 1.0

    def test_writes_history_and_checkpoint(self, toy_cache, tmp_path):
        _, manifest = toy_cache
        out = tmp_path / "run"
        history, _ = train(quick_config(epochs=2), manifest, fresh_model(),
                           out_dir=out)
        assert (out / "checkpoint.pt").exists()
        loaded = read_history(out / "history.csv")
        assert loaded.records == history.records

    def test_empty_split_rejected(self, toy_cache):
        cache, manifest = toy_cache
        hollow = DatasetManifest(root_path=manifest.root_path,
                                 tile_size=manifest.tile_size,
                                 train_ids=list(manifest.train_ids),
                                 val_ids=[], test_ids=[])
        with pytest.raises(ManifestError, match="val"):
            train(quick_config(), hollow, fresh_model())

    def test_divergence_names_epoch_and_step(self, toy_cache):
        _, manifest = toy_cache
        with pytest.raises(DivergenceError, match="epoch 1 step"):
            train(quick_config(learning_rate=1e30, epochs=1), manifest,
                  fresh_model())

    def test_bitwise_deterministic_with_fixed_seed(self, toy_cache):
        _, manifest = toy_cache

        def run():
            config = quick_config(epochs=2, seed=7)
            seed_everything(config.seed)
            model = build_model("b0", None)
            history, _ = train(config, manifest, model)
            return history

        assert run().records == run().records


class _ConstantModel(torch.nn.Module):
    """Emits a constant probability map; used to pin degenerate metrics."""

    def __init__(self, value: float):
        super().__init__()
        self.value = value

    def forward(self, batch):
        n, _, h, w = batch.shape
        probs = torch.full((n, 1, h, w), self.value)
        return SegmentationOutput(probabilities=probs, head_outputs=[])


class TestEvaluate:
    def test_all_background_model_on_background_tiles(self, tmp_path):
        from conftest import write_dataset
        from buildingseg.tiles import prepare_dataset

        root = write_dataset(tmp_path / "root",
                             {"train": 1, "val": 1, "test": 2}, seed=9,
                             rectangles=0)
        manifest = prepare_dataset(root, tmp_path / "cache",
                                   tile_size=FIXTURE_TILE)
        results = evaluate_model(_ConstantModel(0.0), manifest, "test")
        for result in results:
            assert result.scores.accuracy == 1.0
            assert result.scores.iou == 1.0

    def test_per_image_results_in_manifest_order(self, toy_cache):
        _, manifest = toy_cache
        results = evaluate_model(_ConstantModel(1.0), manifest, "train")
        assert [r.source_id for r in results] == manifest.ids("train")

    def test_empty_split_rejected(self, toy_cache):
        _, manifest = toy_cache
        hollow = DatasetManifest(root_path=manifest.root_path,
                                 tile_size=manifest.tile_size,
                                 train_ids=[], val_ids=[], test_ids=[])
        with pytest.raises(ManifestError):
            evaluate_model(_ConstantModel(0.0), hollow, "test")

    def test_checkpoint_evaluation_deterministic(self, trained_run, toy_cache):
        cache, manifest = toy_cache
        checkpoint = Checkpoint.load(trained_run / "checkpoint.pt")
        first = evaluate(checkpoint, manifest, "test")
        second = evaluate(checkpoint, manifest, "test")
        assert first == second
        assert set(first["aggregates"]) == {"per-image-mean", "global-pool"}


class TestPredict:
    def test_writes_binary_png(self, trained_run, toy_root, tmp_path):
        checkpoint = Checkpoint.load(trained_run / "checkpoint.pt")
        image = toy_root / "test" / "images" / "test0.png"
        out = predict(checkpoint, image, tmp_path / "mask.png")
        mask = np.asarray(Image.open(out))
        assert mask.shape == (FIXTURE_TILE, FIXTURE_TILE)
        assert set(np.unique(mask)) <= {0, 255}

    def test_composite_written_alongside(self, trained_run, toy_root, tmp_path):
        checkpoint = Checkpoint.load(trained_run / "checkpoint.pt")
        image = toy_root / "test" / "images" / "test0.png"
        predict(checkpoint, image, tmp_path / "mask.png", composite=True)
        panel = np.asarray(Image.open(tmp_path / "mask_composite.png"))
        assert panel.shape == (FIXTURE_TILE, 2 * FIXTURE_TILE, 3)

    def test_oversized_input_downsampled(self, trained_run, tmp_path):
        rng = np.random.default_rng(0)
        big = rng.integers(0, 256, (3 * FIXTURE_TILE, 3 * FIXTURE_TILE, 3),
                           dtype=np.uint8)
        src = tmp_path / "big.png"
        Image.fromarray(big).save(src)
        checkpoint = Checkpoint.load(trained_run / "checkpoint.pt")
        out = predict(checkpoint, src, tmp_path / "mask.png")
        assert np.asarray(Image.open(out)).shape == (FIXTURE_TILE, FIXTURE_TILE)

    def test_missing_input_raises(self, trained_run, tmp_path):
        checkpoint = Checkpoint.load(trained_run / "checkpoint.pt")
        with pytest.raises(FileNotFoundError):
            predict(checkpoint, tmp_path / "absent.png", tmp_path / "out.png")
