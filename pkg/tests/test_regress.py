import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from regpose import so3
from regpose.phantom import (
    SampleStream, build_subjects, generate_phantom, make_volume_sample, PhantomSpec, subject_specs,
)
from regpose.regress import (
    REDUCED_WIDTHS, TrainConfig, TrainingDiverged, build_network, forward, geodesic_loss, gradient_check,
    load_network, loss_total, predict, read_history_csv, rotvec_l2_loss, sample_loss,
    samples_to_tensor, save_network, train, write_history_csv,
)
from regpose.regress.training import batch_loss


@pytest.fixture(scope="module")
def subjects():
    return build_subjects(subject_specs("train", 2, seed=1))


def stream(subjects, kind, n=2, seed=0):
    return SampleStream(subjects, kind, n, seed=seed)


def n_params(net):
    return sum(p.numel() for p in net.parameters())


# --- networks -----------------------------------------------------------------------

@pytest.mark.parametrize("tag", ["volume_pose", "correction", "slice_pose"])
def test_rotation_head_range_and_location_sign(tag, subjects):
    net = build_network(tag, 0)
    x = samples_to_tensor(net, stream(subjects, {"volume_pose": "volume", "correction": "correction",
                                                 "slice_pose": "slice"}[tag], 3).fixed())
    with torch.no_grad():
        net.rotation_head.bias.fill_(50.0)  # saturate tanh
        h = forward(net, x, "eval")
    assert torch.all(h.rotvec.abs() <= np.pi)
    if tag == "slice_pose":
        assert torch.all(h.slice_z >= 0)
    if tag == "correction":
        assert h.translation.shape == (len(x), 3)


def test_same_seed_same_init():
    a, b = build_network("volume_pose", 7), build_network("volume_pose", 7)
    for (n1, p1), (n2, p2) in zip(a.state_dict().items(), b.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    c = build_network("volume_pose", 8)
    assert not torch.equal(a.rotation_head.weight, c.rotation_head.weight)


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    build_network("slice_pose", 3)
    assert torch.equal(torch.rand(1), expected)


def test_layer_plan():
    net = build_network("volume_pose", 0)
    convs = [m for m in net.modules() if isinstance(m, torch.nn.Conv3d)]
    assert [(c.in_channels, c.out_channels) for c in convs] == [(1, 8), (8, 8), (8, 16), (16, 16), (16, 32), (32, 32)]
    assert all(c.kernel_size == (3, 3, 3) for c in convs)
    assert build_network("correction", 0).trunk.features[0][0].in_channels == 2
    blocks = [m for m in build_network("slice_pose", 0).modules() if type(m).__name__ == "ResBlock2d"]
    assert len(blocks) == 4


def test_zero_weights_give_zero_rotation():
    net = build_network("volume_pose", 0)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    h = forward(net, torch.rand(2, 1, 32, 32, 32), "eval")
    assert torch.all(h.rotvec == 0)


def test_eval_forward_is_idempotent_and_batch_consistent(subjects):
    net = build_network("volume_pose", 0)
    s = stream(subjects, "volume", 1).fixed()[0]
    x = samples_to_tensor(net, [s] * 4)
    a, b = forward(net, x, "eval").rotvec, forward(net, x, "eval").rotvec
    assert torch.equal(a, b)
    assert torch.allclose(a, a[:1].expand_as(a), atol=1e-6)


def test_forward_rejects_wrong_shape():
    with pytest.raises(ValueError, match="expects input"):
        forward(build_network("correction", 0), torch.zeros(1, 1, 32, 32, 32))
    with pytest.raises(ValueError):
        forward(build_network("slice_pose", 0), torch.zeros(1, 1, 32, 32, 32))


def test_unknown_tag():
    with pytest.raises(ValueError):
        build_network("quaternion_pose", 0)


def test_predict_folds_long_rotvecs():
    net = build_network("volume_pose", 0)
    with torch.no_grad():
        net.rotation_head.weight.zero_()
        net.rotation_head.bias.fill_(20.0)  # each component -> pi, norm pi*sqrt(3)
    p = predict(net, torch.zeros(1, 1, 32, 32, 32))[0]
    assert p.folded
    assert np.linalg.norm(p.rotvec) <= np.pi
    np.testing.assert_allclose(p.matrix, so3.rotvec_to_matrix(np.full(3, np.pi * np.tanh(20.0))), atol=1e-6)


def test_rpn1_roundtrip(tmp_path, subjects):
    for tag in ("volume_pose", "correction", "slice_pose"):
        net = build_network(tag, 5, REDUCED_WIDTHS)
        net.train(True)
        kind = {"volume_pose": "volume", "correction": "correction", "slice_pose": "slice"}[tag]
        with torch.no_grad():
            net(samples_to_tensor(net, stream(subjects, kind, 2).fixed()))  # move BN running stats
        save_network(tmp_path / "n.rpn", net)
        back = load_network(tmp_path / "n.rpn")
        assert back.tag == tag and back.seed == 5 and back.widths == REDUCED_WIDTHS
        for (k, v), (k2, v2) in zip(net.state_dict().items(), back.state_dict().items()):
            assert k == k2 and torch.equal(v.float(), v2.float()), k
    assert (tmp_path / "n.rpn").read_bytes()[:4] == b"RPN1"


def test_rpn1_rejects_garbage(tmp_path):
    (tmp_path / "x.rpn").write_bytes(b"RPV1....")
    with pytest.raises(ValueError, match="RPN1"):
        load_network(tmp_path / "x.rpn")


# --- losses -------------------------------------------------------------------------

def test_perfect_prediction_has_zero_loss():
    v = np.array([[0.3, -0.2, 1.0]])
    t = np.array([[1.0, 2.0, -3.0]])
    for stage in (1, 2):
        assert sample_loss(v, v, stage, 0.01, t, t) == pytest.approx(0.0, abs=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_stage2_loss_bound(seed):
    rng = np.random.default_rng(seed)
    v, g = rng.uniform(-np.pi, np.pi, (1, 3)), so3.matrix_to_rotvec(so3.sample_uniform_rotation(rng))[None]
    t1, t2 = rng.uniform(-7, 7, (1, 3)), rng.uniform(-7, 7, (1, 3))
    worst = np.max((t1 - t2) ** 2)
    assert sample_loss(v, g, 2, 0.01, t1, t2) <= np.pi + 0.01 * worst + 1e-9


@pytest.mark.parametrize("theta", [0.2, 1.0, 2.5])
def test_small_angle_agreement_of_the_two_losses(theta):
    eps = 1e-3
    pred = np.array([[0, 0, theta + eps]])
    gt = np.array([[0, 0, theta]])
    assert sample_loss(pred, gt, 1) == pytest.approx(eps, rel=1e-6)
    assert sample_loss(pred, gt, 2) == pytest.approx(eps, rel=1e-3)


def test_geodesic_loss_backward_matches_analytic_gradient():
    rng = np.random.default_rng(1)
    v = torch.tensor(rng.uniform(-1.5, 1.5, (4, 3)), requires_grad=True)
    R = torch.tensor(np.stack([so3.sample_uniform_rotation(rng) for _ in range(4)]))
    geodesic_loss(v, R).sum().backward()
    for i in range(4):
        g, _ = so3.geodesic_loss_grad(v[i].detach().numpy(), R[i].numpy())
        np.testing.assert_allclose(v.grad[i].numpy(), g, atol=1e-12)


def test_l2_loss_is_finite_at_zero_distance():
    v = torch.zeros(2, 3, requires_grad=True)
    rotvec_l2_loss(v, torch.zeros(2, 3)).sum().backward()
    assert torch.all(torch.isfinite(v.grad)) and torch.all(v.grad == 0)


def test_l2_loss_propagates_nan():
    out = rotvec_l2_loss(torch.tensor([[float("nan"), 0.0, 0.0]]), torch.zeros(1, 3))
    assert torch.isnan(out).all()


def test_loss_total_rejects_bad_stage():
    with pytest.raises(ValueError):
        loss_total(torch.zeros(1, 3), torch.zeros(1, 3), 3)


# --- gradient check -----------------------------------------------------------------

def reduced(tag, seed=1):
    net = build_network(tag, seed, REDUCED_WIDTHS)
    assert n_params(net) <= 1e4
    return net


def has_gradient(net, samples, stage):
    net.zero_grad()
    batch_loss(net, samples, stage, 0.01)[0].backward()
    ok = any(bool(p.grad.abs().sum() > 0) for p in net.parameters() if p.grad is not None)
    net.zero_grad()
    return ok


def test_gradient_check_stage1(subjects):
    net = reduced("volume_pose")
    samples = stream(subjects, "volume", 2).fixed()
    assert has_gradient(net, samples, 1)
    assert gradient_check(net, samples, 1, max_params=150) < 1e-3


def test_gradient_check_stage2(subjects):
    net = reduced("correction", 1)
    samples = stream(subjects, "correction", 2).fixed()
    assert has_gradient(net, samples, 2)
    assert gradient_check(net, samples, 2, max_params=150) < 1e-3


def test_gradient_check_slice(subjects):
    net = reduced("slice_pose", 2)
    samples = stream(subjects, "slice", 3).fixed()
    assert has_gradient(net, samples, 2)
    assert gradient_check(net, samples, 2, max_params=150) < 1e-3


def test_all_zero_input_gives_finite_gradients(subjects):
    net = reduced("volume_pose")
    s = stream(subjects, "volume", 2).fixed()
    for x in s:
        object.__setattr__(x, "input", x.input.with_data(np.zeros(x.input.dims)))
    loss, _ = batch_loss(net, s, 2, 0.01)
    loss.backward()
    assert all(torch.all(torch.isfinite(p.grad)) for p in net.parameters())


# --- training -----------------------------------------------------------------------

def test_zero_epochs_leaves_params_unchanged(subjects):
    net = reduced("volume_pose")
    before = {k: v.clone() for k, v in net.state_dict().items()}
    res = train(net, stream(subjects, "volume"), TrainConfig(0, 0, 4))
    assert res.history == []
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k])


def test_training_is_bit_reproducible(subjects):
    outs = []
    for _ in range(2):
        net = reduced("correction", 3)
        res = train(net, stream(subjects, "correction", 4), TrainConfig(1, 1, 4, seed=3))
        outs.append((res.history, [p.detach().clone() for p in net.parameters()]))
    assert [r.mean_loss for r in outs[0][0]] == [r.mean_loss for r in outs[1][0]]
    assert all(torch.equal(a, b) for a, b in zip(outs[0][1], outs[1][1]))


def test_divergence_aborts(subjects):
    net = reduced("volume_pose")
    with torch.no_grad():
        net.rotation_head.weight.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train(net, stream(subjects, "volume"), TrainConfig(1, 0, 4))


def test_empty_data_rejected(subjects):
    with pytest.raises(ValueError):
        train(reduced("volume_pose"), [], TrainConfig(1, 0, 4))


@pytest.mark.parametrize("kwargs", [dict(epochs_stage1=-1), dict(batch_size=0), dict(lam=-1.0),
                                    dict(learning_rate=0.0), dict(stage2_loss="cosine")])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_history_csv_roundtrip(tmp_path, subjects):
    res = train(reduced("slice_pose"), stream(subjects, "slice", 4), TrainConfig(1, 1, 4))
    write_history_csv(tmp_path / "h.csv", res.history)
    assert read_history_csv(tmp_path / "h.csv") == res.history
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,stage,mean_loss,mean_geodesic_deg"
    assert [r.stage for r in res.history] == [1, 2]


@pytest.mark.slow
def test_overfit_single_subject():
    # 50 fixed samples of one subject; the net should memorise them
    vol = generate_phantom(PhantomSpec(seed=2))
    rng = np.random.default_rng(0)
    data = [make_volume_sample(vol, rng, scale=1.0) for _ in range(50)]
    res = train(build_network("volume_pose", 0), data, TrainConfig(100, 100, 50))
    assert len(res.history) == 200
    assert res.history[-1].mean_geodesic_deg < 3.0


def test_stage1_loss_decreases(subjects):
    net = build_network("volume_pose", 0)
    res = train(net, stream(subjects, "volume", 24), TrainConfig(4, 0, 8))
    assert res.history[-1].mean_loss < res.history[0].mean_loss
