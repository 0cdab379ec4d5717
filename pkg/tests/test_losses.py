import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from msreid import losses as L
from oracles import autograd_grad, central_fd, relative_error

E_SOFTMAX = -math.log(math.e / (math.e + 1))  # positive sim 1, negative sim 0, temperature 1


def _eye(n, d=None):
    return torch.eye(n, d or n, dtype=torch.float64)


def test_i2t_two_identity_softmax_value():
    prompts = _eye(2)
    v = _eye(2)[:1]
    assert L.loss_i2t(v, prompts, [0], temperature=1.0).item() == pytest.approx(0.31326, abs=1e-5)
    assert L.loss_i2t(v, prompts, [0], temperature=1.0).item() == pytest.approx(E_SOFTMAX, rel=1e-12)


def test_i2t_single_identity_is_zero():
    v = torch.randn(3, 5, dtype=torch.float64)
    assert L.loss_i2t(v, torch.randn(1, 5, dtype=torch.float64), [0, 0, 0]).item() == 0.0


def test_i2t_equal_similarities_give_log_n():
    prompts = torch.ones(5, 4, dtype=torch.float64)
    v = torch.randn(2, 4, dtype=torch.float64)
    assert L.loss_i2t(v, prompts, [1, 3]).item() == pytest.approx(math.log(5), rel=1e-12)


def test_t2i_mirror_and_degenerate_cases():
    prompts = _eye(2)
    v = _eye(2)  # instance 0 is identity 0, instance 1 identity 1
    val = L.loss_t2i(prompts, v, [0, 1], temperature=1.0).item()
    assert val == pytest.approx(E_SOFTMAX, rel=1e-12)
    one = L.loss_t2i(torch.randn(1, 3, dtype=torch.float64), torch.randn(1, 3, dtype=torch.float64), [0])
    assert one.item() == 0.0
    # K wrong-identity instances plus the positive, all equally similar
    k = 4
    v = torch.ones(k + 1, 3, dtype=torch.float64)
    out = L.loss_t2i(torch.ones(k + 1, 3, dtype=torch.float64), v, list(range(k + 1)))
    assert out.item() == pytest.approx(math.log(k + 1), rel=1e-12)


def test_i2p_cases():
    protos = _eye(2)
    assert L.loss_i2p(_eye(2)[:1], protos, [0], temperature=1.0).item() == pytest.approx(E_SOFTMAX, rel=1e-12)
    assert L.loss_i2p(torch.randn(2, 3, dtype=torch.float64), torch.randn(1, 3, dtype=torch.float64),
                      [0, 0]).item() == 0.0
    same = torch.ones(3, 4, dtype=torch.float64)
    assert L.loss_i2p(torch.randn(2, 4, dtype=torch.float64), same, [0, 2]).item() == pytest.approx(math.log(3))


def test_t2p_p2t_orthogonal_identities():
    protos = _eye(2)
    prompts = protos.clone()
    assert L.loss_t2p(prompts, protos, temperature=1.0).item() == pytest.approx(E_SOFTMAX, rel=1e-12)
    assert L.loss_p2t(protos, prompts, temperature=1.0).item() == pytest.approx(E_SOFTMAX, rel=1e-12)
    one = torch.randn(1, 4, dtype=torch.float64)
    assert L.loss_t2p(one, one).item() == 0.0
    assert L.loss_p2t(one, one).item() == 0.0


def test_t2p_derangement_is_worse():
    n = 5
    protos = _eye(n)
    matched = L.loss_t2p(protos.clone(), protos).item()
    perm = torch.tensor([1, 2, 3, 4, 0])  # no fixed points
    deranged = L.loss_t2p(protos[perm], protos).item()
    assert deranged > matched


def test_t2p_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        L.loss_t2p(torch.randn(3, 4), torch.randn(4, 4))


def test_labels_out_of_range():
    with pytest.raises(ValueError):
        L.loss_i2t(torch.randn(2, 4), torch.randn(3, 4), [0, 3])
    with pytest.raises(ValueError):
        L.loss_id(torch.randn(2, 3), [0, 5])


def test_prompt_loss_arithmetic_and_linearity():
    assert L.loss_prompt(1.0, 0.5, 0.5, 0.0, 0.0) == 0.0
    assert L.loss_prompt(1.0, 0.5, 0.5, 0.1, 1.0) == pytest.approx(1.1)
    a = L.loss_prompt(0.7, 0.2, 0.4, 0.3, 2.0)
    b = L.loss_prompt(0.7, 0.2, 0.4, 0.6, 4.0)
    assert b == pytest.approx(2 * a)


def test_loss_id_cases():
    assert L.loss_id(torch.zeros(3, 4), [0, 1, 3]).item() == pytest.approx(math.log(4))
    assert L.loss_id(torch.randn(6, 1), [0] * 6).item() == 0.0
    prev = float("inf")
    for scale in (1.0, 4.0, 16.0, 64.0):
        val = L.loss_id(F.one_hot(torch.tensor([0, 2]), 3).double() * scale, [0, 2]).item()
        assert val < prev
        prev = val
    assert prev < 1e-20


def _rectangle(dp, dn):
    # identity 0 on the bottom edge, identity 1 on the top edge: every anchor sees d_p = dp, d_n = dn
    return torch.tensor([[0.0, 0.0], [dp, 0.0], [0.0, dn], [dp, dn]], dtype=torch.float64)


def test_triplet_anchor_values():
    labels = torch.tensor([0, 0, 1, 1])
    for dp, dn, want in ((0.2, 0.5, 0.0), (0.5, 0.2, 0.6)):
        got = L.loss_triplet(_rectangle(dp, dn), labels, 0.3, normalize=False).item()
        assert got == pytest.approx(want, abs=1e-12)
    same = torch.zeros(4, 3, dtype=torch.float64)
    assert L.loss_triplet(same, labels, 0.3, normalize=False).item() == pytest.approx(0.3, abs=1e-10)


def test_triplet_single_identity_error():
    with pytest.raises(ValueError, match="two identities"):
        L.loss_triplet(torch.randn(4, 3), [1, 1, 1, 1])


def test_triplet_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=(8, 5))
        labels = rng.permutation([0, 0, 1, 1, 2, 2, 3, 3])
        xn = x / np.linalg.norm(x, axis=1, keepdims=True)
        total = 0.0
        for a in range(8):
            pos = [np.linalg.norm(xn[a] - xn[j]) for j in range(8) if j != a and labels[j] == labels[a]]
            neg = [np.linalg.norm(xn[a] - xn[j]) for j in range(8) if labels[j] != labels[a]]
            total += max(max(pos) - min(neg) + 0.3, 0.0)
        got = L.loss_triplet(torch.from_numpy(x), torch.from_numpy(labels), 0.3).item()
        assert got == pytest.approx(total / 8, rel=1e-12)


def test_final_loss_arithmetic():
    assert L.loss_final(0.0, 0.0, 0.0, 0.0) == 0.0
    assert L.loss_final(1.0, 1.0, 1.0, 1.0, 0.9) == pytest.approx(3.9)


def test_combine_missing_terms_count_zero():
    cfg = L.LossConfig()
    assert L.combine({"id": 1.0, "tri": 2.0}, cfg) == pytest.approx(3.0)
    full = {"id": 1.0, "tri": 1.0, "i2p": 1.0, "i2t": 1.0, "t2p": 0.5, "p2t": 0.5}
    assert L.combine(full, cfg) == pytest.approx(1 + 1 + 0.9 + 0.1 + 1.0)


def test_multi_spectra_is_mean_over_spectra():
    torch.manual_seed(0)
    v = torch.randn(3, 6, 4, dtype=torch.float64)
    t = torch.randn(3, 4, 4, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 2, 3, 3])
    joint = L.loss_i2t(v, t, labels).item()
    per = [L.loss_i2t(v[m], t[m], labels).item() for m in range(3)]
    assert joint == pytest.approx(sum(per) / 3, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_contrastive_terms_scale_invariant(seed, scale):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(2, 6, 4, generator=g, dtype=torch.float64)
    t = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    for fn in (lambda a, b: L.loss_i2t(a, b, labels), lambda a, b: L.loss_i2p(a, b, labels),
               lambda a, b: L.loss_t2p(b, b.flip(1)), lambda a, b: L.loss_t2i(b, a, labels)):
        assert fn(v * scale, t * scale).item() == pytest.approx(fn(v, t).item(), rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative_and_bounded_by_uniform_plus_margin(seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(2, 6, 4, generator=g, dtype=torch.float64)
    p = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    for val in (L.loss_i2t(v, p, labels), L.loss_i2p(v, p, labels), L.loss_t2p(p, p.flip(1)),
                L.loss_p2t(p, p.flip(1)), L.loss_triplet(v, labels)):
        assert val.item() >= 0.0
    # triplet on unit vectors: hinge at most 2 + margin
    assert L.loss_triplet(v, labels, 0.3).item() <= 2.3 + 1e-12


# --- gradient checks against central finite differences ---------------------

def random_instance(rng, m=2, per_id=2, n_ids=3, d=5):
    labels = torch.tensor(rng.permutation(np.repeat(np.arange(n_ids), per_id)))
    v = torch.tensor(rng.normal(size=(m, n_ids * per_id, d)))
    prompts = torch.tensor(rng.normal(size=(m, n_ids, d)))
    protos = torch.tensor(rng.normal(size=(m, n_ids, d)))
    logits = torch.tensor(rng.normal(size=(m, n_ids * per_id, n_ids)))
    return labels, v, prompts, protos, logits


def gradient_cases(labels, v, prompts, protos, logits):
    """(name, closure over one tensor, the tensor) for every loss and each differentiable input."""
    ids = labels.unique()
    return [
        ("i2t/v", lambda x: L.loss_i2t(x, prompts, labels), v),
        ("i2t/prompts", lambda x: L.loss_i2t(v, x, labels), prompts),
        ("t2i/prompts", lambda x: L.loss_t2i(x, v, labels), prompts),
        ("t2i/v", lambda x: L.loss_t2i(prompts, x, labels), v),
        ("i2p/v", lambda x: L.loss_i2p(x, protos, labels), v),
        ("t2p/prompts", lambda x: L.loss_t2p(x, protos, ids), prompts),
        ("p2t/prompts", lambda x: L.loss_p2t(protos, x, ids), prompts),
        ("id/logits", lambda x: L.loss_id(x, labels), logits),
        ("tri/v", lambda x: L.loss_triplet(x, labels, 0.3), v),
        ("final/v", lambda x: L.combine({
            "id": L.loss_id(torch.einsum("mbd,mcd->mbc", x, protos), labels),
            "tri": L.loss_triplet(x, labels), "i2p": L.loss_i2p(x, protos, labels),
            "i2t": L.loss_i2t(x, prompts, labels)}, L.LossConfig()), v),
    ]


def max_gradient_error(n_instances=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(n_instances):
        for name, fn, x in gradient_cases(*random_instance(rng)):
            err = relative_error(autograd_grad(fn, x).numpy(), central_fd(fn, x, 1e-5).numpy())
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def test_gradients_match_finite_differences():
    worst = max_gradient_error(n_instances=5, seed=1)
    assert all(err < 1e-4 for err in worst.values()), worst


def test_detached_inputs_get_no_gradient():
    rng = np.random.default_rng(3)
    labels, v, prompts, protos, _ = random_instance(rng)
    protos = protos.requires_grad_(True)
    vv = v.clone().requires_grad_(True)
    (L.loss_i2p(vv, protos, labels) + L.loss_t2p(prompts, protos) + L.loss_p2t(protos, prompts)).backward()
    assert protos.grad is None
    assert vv.grad is not None
