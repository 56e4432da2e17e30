import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from shearad.datamodel import SUBSET_A, DatasetManifest, SampleRecord, build_subset
from shearad.errors import ValidationError
from shearad.models.autoencoders import AEConfig, ConvAE, ConvAEConfig, FullyConnectedAE, reconstruction_error
from shearad.models.preprocess import (
    aspect_pad,
    heatmap_to_image_grid,
    preprocess,
    preprocess_stfpm,
)
from shearad.models.stfpm import (
    STFPM,
    ResNetPyramid,
    STFPMConfig,
    TeacherLoadError,
    ToyPyramid,
    combine_maps,
    layer_distance,
    load_teacher,
    parameter_hash,
    save_teacher,
    stfpm_loss,
    upsample_aligned,
)
from shearad.models.training import (
    CheckpointError,
    Hyperparams,
    anomaly_maps,
    latent_features,
    load_model,
    reconstruction_errors,
    save_model,
    train,
)
from shearad.synthgen import GeneratorConfig, generate_dataset


@pytest.fixture(scope="module")
def tiny_subset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    m = generate_dataset(GeneratorConfig(counts=(4, 12, 0)), 3, root)
    return build_subset(m, SUBSET_A, (0.6, 0.2, 0.2), 0)


@pytest.fixture(scope="module")
def teacher():
    torch.manual_seed(0)
    return ResNetPyramid((1, 2, 3)).eval()


# ---------------------------------------------------------------- preprocess


def test_ae_input_from_full_resolution():
    x = preprocess(np.zeros((1050, 1920), np.float32), "AE")
    assert x.shape == (1, 4800)


def test_minus_pi_maps_to_zero():
    x = preprocess(np.full((50, 96), -math.pi, np.float32), "ConvAE")
    assert x.shape == (1, 1, 50, 96)
    assert torch.all(x == 0.0)


def test_native_size_is_identity():
    img = np.random.default_rng(0).uniform(-math.pi, math.pi, (50, 96)).astype(np.float32)
    x = preprocess(img, "ConvAE")
    np.testing.assert_array_equal(x[0, 0].numpy(), ((torch.from_numpy(img) + math.pi) / (2 * math.pi)).numpy())


def test_stfpm_input_replicates_channels():
    img = np.random.default_rng(0).uniform(-3, 3, (105, 192)).astype(np.float32)
    x = preprocess_stfpm(img, (64, 128))
    assert x.shape == (1, 3, 64, 128)
    std = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)
    mean = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
    raw = x[0] * std + mean
    torch.testing.assert_close(raw[0], raw[1])
    torch.testing.assert_close(raw[0], raw[2])


def test_aspect_pad_and_crop_back():
    batch = torch.zeros(1, 1, 105, 192)
    _, padded = aspect_pad(batch, 64, 128)
    assert padded == (105, 210)
    hm = np.arange(64 * 128, dtype=np.float32).reshape(64, 128)
    assert heatmap_to_image_grid(hm, (105, 192), (64, 128)).shape == (105, 192)


# ---------------------------------------------------------------- autoencoders


def test_ae_shapes_and_latent():
    ae = FullyConnectedAE(AEConfig()).eval()
    x = torch.rand(3, 4800)
    assert ae(x).shape == x.shape
    assert ae.encode(x).shape == (3, 10)
    assert torch.all(torch.isfinite(ae(x)))
    with pytest.raises(ValidationError):
        ae(torch.rand(3, 4801))


def test_ae_eval_mode_is_deterministic():
    ae = FullyConnectedAE(AEConfig(dropout_rate=0.5)).eval()
    x = torch.rand(2, 4800)
    assert torch.equal(ae(x), ae(x))
    ae.train()
    torch.manual_seed(0)
    a = ae(x)
    assert not torch.equal(a, ae(x))


def test_convae_shape_closure():
    cae = ConvAE(ConvAEConfig()).eval()
    x = torch.rand(2, 1, 50, 96)
    assert cae(x).shape == x.shape
    assert cae.encode(x).shape[1] == 256
    with pytest.raises(ValidationError):
        cae(torch.rand(2, 1, 48, 96))


def test_convae_config():
    assert ConvAEConfig().conv_channels == (96, 128, 256, 256)
    with pytest.raises(ValidationError):
        ConvAEConfig(kernel=5)


@pytest.mark.parametrize(
    "x,rec,expected",
    [([1.0, 2.0], [1.0, 2.0], 0.0), ([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 1.0), ([0.0, 2.0], [1.0, 0.0], 2.5)],
)
def test_reconstruction_error_examples(x, rec, expected):
    assert reconstruction_error(torch.tensor(x), torch.tensor(rec)) == pytest.approx(expected)


def test_reconstruction_error_shape_mismatch():
    with pytest.raises(ValidationError):
        reconstruction_error(torch.zeros(3), torch.zeros(4))


# ---------------------------------------------------------------- STFPM pieces


def test_distance_examples():
    t = torch.tensor([1.0, 0.0]).view(1, 2, 1, 1)
    assert layer_distance(t, t).item() == 0.0
    assert layer_distance(t, torch.tensor([0.0, 3.0]).view(1, 2, 1, 1)).item() == pytest.approx(1.0)
    assert layer_distance(t, -2 * t).item() == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        layer_distance(t, torch.zeros(1, 3, 1, 1))


def test_zero_feature_vector_is_finite():
    d = layer_distance(torch.zeros(1, 4, 2, 2), torch.ones(1, 4, 2, 2))
    assert torch.all(torch.isfinite(d))


@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1e-3, 1e3))
def test_distance_range(seed, scale):
    g = torch.Generator().manual_seed(seed)
    t = torch.randn(2, 5, 3, 4, generator=g, dtype=torch.float64) * scale
    s = torch.randn(2, 5, 3, 4, generator=g, dtype=torch.float64)
    d = layer_distance(t, s)
    assert torch.all(d >= 0) and torch.all(d <= 2 + 1e-12)


def test_loss_examples():
    assert stfpm_loss([torch.zeros(2, 3, 3)]).item() == 0.0
    assert stfpm_loss([torch.ones(1, 4, 4)]).item() == pytest.approx(1.0)
    maps = [torch.full((1, 2, 2), v) for v in (0.1, 0.2, 0.3)]
    assert stfpm_loss(maps).item() == pytest.approx(0.6)
    with pytest.raises(ValidationError):
        stfpm_loss([])


def test_aligned_upsampling_places_features_at_stride():
    d = torch.zeros(1, 4, 8)
    d[0, 1, 2] = 1.0
    up = upsample_aligned(d, (64, 128))
    assert up.shape == (1, 64, 128)
    assert tuple(np.unravel_index(int(up.argmax()), (64, 128))) == (16, 32)
    assert up.max().item() == pytest.approx(1.0)


def test_single_layer_combination_is_upsampled_map():
    d = torch.rand(2, 4, 4)
    torch.testing.assert_close(combine_maps([d], (16, 16), "product"), upsample_aligned(d, (16, 16)))
    torch.testing.assert_close(combine_maps([d], (16, 16), "sum"), upsample_aligned(d, (16, 16)))


def test_product_and_sum_rules():
    a, b = torch.rand(1, 8, 8), torch.rand(1, 8, 8)
    torch.testing.assert_close(combine_maps([a, b], (8, 8), "product"), a * b)
    torch.testing.assert_close(combine_maps([a, b], (8, 8), "sum"), a + b)


def _toy_gradient_error() -> float:
    torch.manual_seed(0)
    teacher = ToyPyramid().double()
    student = ToyPyramid().double()
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    model = STFPM(teacher, student)
    params = list(model.student.parameters())
    loss = model.loss(x)
    grads = torch.autograd.grad(loss, params)
    worst, h = 0.0, 1e-6
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = model.loss(x).item()
                flat[i] = orig - h
                down = model.loss(x).item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                ana = gflat[i].item()
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def test_gradient_matches_finite_differences():
    assert _toy_gradient_error() < 1e-4


def test_student_copy_gives_zero_map(teacher):
    model = STFPM(teacher, copy.deepcopy(teacher))
    x = torch.randn(3, 3, 64, 64)
    assert model.anomaly_map(x).max().item() < 1e-6


def test_teacher_is_frozen_and_stays_in_eval(teacher):
    model = STFPM(copy.deepcopy(teacher))
    model.train()
    assert not model.teacher.training and model.student.training
    assert not any(p.requires_grad for p in model.teacher.parameters())


def test_stfpm_config_validation():
    with pytest.raises(ValidationError):
        STFPMConfig(input_resolution=(100, 128))
    with pytest.raises(ValidationError):
        STFPMConfig(combination="max")
    with pytest.raises(ValidationError):
        STFPMConfig(backbone="resnet50")


# ---------------------------------------------------------------- teacher checkpoints


def test_teacher_round_trip(tmp_path, teacher):
    digest = save_teacher(teacher, tmp_path / "t.pt", {"mean": (0.5,) * 3, "std": (0.25,) * 3})
    a, norm, h1 = load_teacher(tmp_path / "t.pt")
    b, _, h2 = load_teacher(tmp_path / "t.pt")
    assert h1 == h2 == digest and norm["mean"] == [0.5] * 3
    x = torch.zeros(1, 3, 64, 64)
    fa, fb = a(x), b(x)
    assert all(torch.all(torch.isfinite(f)) for f in fa)
    assert all(torch.equal(u, v) for u, v in zip(fa, fb))
    assert not any(p.requires_grad for p in a.parameters())


def test_torchvision_state_dict_is_accepted(tmp_path):
    import torchvision

    torch.save(torchvision.models.resnet18(weights=None).state_dict(), tmp_path / "tv.pt")
    backbone, norm, _ = load_teacher(tmp_path / "tv.pt")
    assert norm["mean"] == (0.485, 0.456, 0.406)
    assert [f.shape[1] for f in backbone(torch.zeros(1, 3, 64, 64))] == [64, 128, 256]


def test_truncated_teacher(tmp_path, teacher):
    save_teacher(teacher, tmp_path / "t.pt", {"mean": (0.5,) * 3, "std": (0.25,) * 3})
    raw = (tmp_path / "t.pt").read_bytes()
    (tmp_path / "t.pt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TeacherLoadError):
        load_teacher(tmp_path / "t.pt")


def test_topology_mismatch(tmp_path):
    torch.save({"conv1.weight": torch.zeros(3, 3, 3, 3)}, tmp_path / "bad.pt")
    with pytest.raises(TeacherLoadError, match="topology"):
        load_teacher(tmp_path / "bad.pt")


def test_missing_teacher_file(tmp_path):
    with pytest.raises(TeacherLoadError):
        load_teacher(tmp_path / "nope.pt")


# ---------------------------------------------------------------- training


def test_one_epoch_bookkeeping(tiny_subset):
    m = train("AE", tiny_subset, Hyperparams(epochs=1, batch_size=4), seed=0)
    assert m.metadata["epochs"] == 1
    assert len(m.metadata["train_losses"]) == 1 and len(m.metadata["val_losses"]) == 1


def test_autoencoder_loss_decreases(tiny_subset):
    m = train("ConvAE", tiny_subset, Hyperparams(epochs=8, batch_size=4, learning_rate=1e-3), seed=0)
    losses = m.metadata["train_losses"]
    assert losses[-1] < losses[0]


def test_defective_training_sample_is_fatal(tiny_subset):
    recs = list(tiny_subset.samples)
    bad = next(r for r in recs if r.defective)
    recs[recs.index(bad)] = SampleRecord(bad.id, bad.path, bad.condition, True, bad.boxes, "train")
    poisoned = DatasetManifest(tiny_subset.version, recs, "", root=tiny_subset.root)
    with pytest.raises(ValidationError, match=bad.id):
        train("AE", poisoned, Hyperparams(epochs=1), seed=0)


def test_empty_training_split(tiny_subset):
    recs = [SampleRecord(r.id, r.path, r.condition, r.defective, r.boxes, "val" if r.split == "train" else r.split)
            for r in tiny_subset.samples]
    with pytest.raises(ValidationError, match="empty"):
        train("AE", DatasetManifest("1", recs, "", root=tiny_subset.root), Hyperparams(epochs=1), seed=0)


def test_stfpm_training_keeps_teacher_and_reduces_loss(tiny_subset, teacher):
    cfg = STFPMConfig(input_resolution=(64, 128))
    before = parameter_hash(teacher)
    norm = {"mean": (0.485, 0.456, 0.406), "std": (0.229, 0.224, 0.225)}
    hp = Hyperparams(epochs=4, batch_size=4, learning_rate=0.05, momentum=0.9, weight_decay=1e-4)
    m = train("STFPM", tiny_subset, hp, 0, cfg, (teacher, norm, "hash"))
    assert parameter_hash(m.module.teacher) == before
    losses = m.metadata["train_losses"]
    assert losses[-1] < losses[0]
    assert m.metadata["teacher_hash"] == "hash"


def test_training_is_deterministic(tiny_subset):
    a = train("AE", tiny_subset, Hyperparams(epochs=2, batch_size=4), seed=5)
    b = train("AE", tiny_subset, Hyperparams(epochs=2, batch_size=4), seed=5)
    assert a.metadata["train_losses"] == b.metadata["train_losses"]
    assert all(torch.equal(p, q) for p, q in zip(a.module.state_dict().values(), b.module.state_dict().values()))


def test_checkpoint_round_trip_and_corruption(tmp_path, tiny_subset, teacher):
    norm = {"mean": (0.485, 0.456, 0.406), "std": (0.229, 0.224, 0.225)}
    m = train("STFPM", tiny_subset, Hyperparams(epochs=1, batch_size=4, learning_rate=0.01), 0,
              STFPMConfig(input_resolution=(64, 128)), (teacher, norm, "h"))
    digest = save_model(m, tmp_path / "s.pt")
    assert save_model(m, tmp_path / "s2.pt") == digest
    back = load_model(tmp_path / "s.pt")
    imgs = np.random.default_rng(0).uniform(-3, 3, (2, 105, 192)).astype(np.float32)
    np.testing.assert_array_equal(anomaly_maps(m, imgs), anomaly_maps(back, imgs))
    assert anomaly_maps(back, imgs, image_grid=True).shape == (2, 105, 192)
    assert latent_features(back, imgs).shape == (2, 256)
    raw = bytearray((tmp_path / "s.pt").read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "s.pt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "s.pt")


def test_inference_helpers_check_kind(tiny_subset):
    m = train("AE", tiny_subset, Hyperparams(epochs=1, batch_size=4), seed=0)
    imgs = np.zeros((2, 105, 192), np.float32)
    assert reconstruction_errors(m, imgs).shape == (2,)
    assert latent_features(m, imgs).shape == (2, 10)
    with pytest.raises(ValidationError):
        anomaly_maps(m, imgs)
