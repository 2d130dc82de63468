import math

import pytest
import torch

import stitchlab as sl
from stitchlab.objectives import stitch_objective_loss

from conftest import MICRO_RES


def _identity_self_stitch(net, tap):
    layer = sl.identity_stitch_layer(net.tap_shapes[tap][0], tap, tap)
    return sl.StitchedModel(net, net, layer, tap, tap)


def test_slm_equal_logits_gives_target_entropy():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(16, 10, generator=g)
    soft = torch.softmax(logits, dim=1)
    entropy = float(-(soft * soft.log()).sum(1).mean())
    assert float(sl.slm_loss(logits, logits)) == pytest.approx(entropy, rel=1e-6)


def test_slm_uniform_vs_onehot_is_ln_k():
    end_logits = torch.full((4, 10), -1000.0)
    end_logits[:, 3] = 1000.0  # softmax is numerically one-hot
    stitched = torch.zeros(4, 10)  # uniform prediction
    assert float(sl.slm_loss(stitched, end_logits)) == pytest.approx(math.log(10), rel=1e-6)


def test_slm_hand_computed_three_class():
    # soft target (0.5, 0.3, 0.2); prediction logits (1, 0, -1)
    target = torch.tensor([[0.5, 0.3, 0.2]])
    stitched = torch.tensor([[1.0, 0.0, -1.0]])
    log_p = torch.log_softmax(stitched, dim=1)[0]
    expected = -(0.5 * float(log_p[0]) + 0.3 * float(log_p[1]) + 0.2 * float(log_p[2]))
    end_logits = target.log()  # softmax(log t) = t
    assert float(sl.slm_loss(stitched, end_logits)) == pytest.approx(expected, rel=1e-6)


def test_slm_rejects_nonfinite():
    with pytest.raises(sl.NumericsError):
        sl.slm_loss(torch.tensor([[float("inf"), 0.0]]), torch.zeros(1, 2))


def test_tlm_correct_confident_prediction_near_zero():
    logits = torch.full((3, 10), -100.0)
    logits[:, 7] = 100.0
    labels = torch.full((3,), 7)
    assert float(sl.tlm_loss(logits, labels)) < 1e-6


def test_tlm_uniform_is_ln_k():
    assert float(sl.tlm_loss(torch.zeros(5, 10), torch.arange(5))) == pytest.approx(
        math.log(10), rel=1e-6)


def test_tlm_label_range_checked():
    with pytest.raises(sl.LabelError):
        sl.tlm_loss(torch.zeros(2, 4), torch.tensor([0, 4]))
    with pytest.raises(sl.LabelError):
        sl.tlm_loss(torch.zeros(2, 4), torch.tensor([-1, 0]))


def test_slm_tlm_coincide_on_exact_onehot_targets():
    g = torch.Generator().manual_seed(1)
    stitched = torch.randn(8, 10, generator=g)
    labels = torch.arange(8) % 10
    end_logits = torch.full((8, 10), -200.0)
    end_logits[torch.arange(8), labels] = 200.0
    slm = float(sl.slm_loss(stitched, end_logits))
    tlm = float(sl.tlm_loss(stitched, labels))
    assert slm == pytest.approx(tlm, rel=1e-6)


def test_hint_zero_at_equality_and_homogeneity():
    g = torch.Generator().manual_seed(2)
    a = torch.randn(4, 3, 5, 5, generator=g)
    assert float(sl.hint_loss(a, a)) == 0.0
    assert float(sl.hint_loss(a, a, normalized=True)) == 0.0
    for scale in (0.5, 2.0, 100.0):
        loss = sl.hint_loss(torch.zeros_like(a), scale * a, normalized=True)
        assert float(loss) == pytest.approx(1.0, rel=1e-5)


def test_hint_matches_brute_force_frobenius():
    g = torch.Generator().manual_seed(3)
    a = torch.randn(6, 4, 3, 3, generator=g).double()
    b = torch.randn(6, 4, 3, 3, generator=g).double()
    brute = math.sqrt(sum((float(x) - float(y)) ** 2
                          for x, y in zip(a.flatten(), b.flatten())))
    assert float(sl.hint_loss(a, b)) == pytest.approx(brute, rel=1e-9)
    assert float(sl.hint_loss(a, b, normalized=True)) == pytest.approx(
        brute / math.sqrt(sum(float(y) ** 2 for y in b.flatten())), rel=1e-9)


def test_hint_scale_invariance_of_normalized_form():
    g = torch.Generator().manual_seed(4)
    a = torch.randn(5, 8, generator=g)
    b = torch.randn(5, 8, generator=g)
    base = float(sl.hint_loss(a, b, normalized=True))
    for lam in (1e-3, 0.7, 42.0):
        scaled = float(sl.hint_loss(lam * a, lam * b, normalized=True))
        assert scaled == pytest.approx(base, rel=1e-6)


def test_fula_zero_at_identity(micro_net):
    micro_net.eval()
    sm = _identity_self_stitch(micro_net, 5)
    x = torch.rand(4, 3, MICRO_RES, MICRO_RES, generator=torch.Generator().manual_seed(5))
    w = sl.make_fula_weights(5, 9, "uniform")
    assert float(sl.fula_loss(sm, x, w)) == 0.0


def test_fula_reduces_to_structural_hint(micro_pair):
    front, end = micro_pair
    front.eval(), end.eval()
    tap = 4
    g = torch.Generator().manual_seed(6)
    layer = sl.StitchLayer(front.tap_shapes[tap][0], end.tap_shapes[tap][0],
                           in_tap=tap, out_tap=tap)
    layer.set_affine(torch.randn(layer.out_channels, layer.in_channels, generator=g),
                     torch.randn(layer.out_channels, generator=g))
    sm = sl.StitchedModel(front, end, layer, tap, tap)
    x = torch.rand(4, 3, MICRO_RES, MICRO_RES, generator=g)
    w = sl.FuLAWeights((1.0,) + (0.0,) * (9 - tap))
    with torch.no_grad():
        direct = sl.hint_loss(sm.stitch_activation(x), end.compose_to(tap, x), normalized=True)
        via_fula = sl.fula_loss(sm, x, w)
    assert float(via_fula) == pytest.approx(float(direct), rel=1e-6)


def test_fula_last_only_matches_deep_hint(micro_pair):
    front, end = micro_pair
    front.eval(), end.eval()
    tap = 7
    g = torch.Generator().manual_seed(7)
    layer = sl.StitchLayer(front.tap_shapes[tap][0], end.tap_shapes[tap][0],
                           in_tap=tap, out_tap=tap)
    layer.set_affine(torch.randn(layer.out_channels, layer.in_channels, generator=g),
                     torch.randn(layer.out_channels, generator=g))
    sm = sl.StitchedModel(front, end, layer, tap, tap)
    x = torch.rand(4, 3, MICRO_RES, MICRO_RES, generator=g)
    w = sl.make_fula_weights(tap, 9, "last-only")
    assert w.c == (0.0, 0.0, 1.0)
    with torch.no_grad():
        z = sm.stitch_activation(x)
        native = end.compose_to(tap, x)
        for seg in end.segments[tap:9]:
            z, native = seg(z), seg(native)
        direct = sl.hint_loss(z, native, normalized=True)
        via = sl.fula_loss(sm, x, w)
    assert float(via) == pytest.approx(float(direct), rel=1e-6)


def test_make_fula_weights_modes():
    single = sl.make_fula_weights(9, 9)
    assert single.c == (1.0,)
    uniform = sl.make_fula_weights(1, 9, "uniform")
    assert len(uniform.c) == 9
    assert all(v == pytest.approx(1 / 9) for v in uniform.c)
    cut = sl.make_fula_weights(2, 9, "cutoff", n=3)
    assert cut.c[:4] == (0.25, 0.25, 0.25, 0.25)
    assert all(v == 0.0 for v in cut.c[4:])
    with pytest.raises(sl.ConfigError):
        sl.make_fula_weights(5, 9, "cutoff", n=5)
    with pytest.raises(sl.ConfigError):
        sl.make_fula_weights(5, 9, "no-such-mode")


def test_fula_weights_simplex_invariant():
    for j in (1, 3, 8, 9):
        for mode, n in (("uniform", None), ("last-only", None), ("cutoff", 0), ("cutoff", 1)):
            if mode == "cutoff" and n > 9 - j:
                continue
            w = sl.make_fula_weights(j, 9, mode, n)
            assert len(w.c) == 10 - j
            assert all(v >= 0 for v in w.c)
            assert sum(w.c) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(sl.ConfigError):
        sl.FuLAWeights((0.5, 0.6))
    with pytest.raises(sl.ConfigError):
        sl.FuLAWeights((-0.1, 1.1))


def test_objective_kind_validation():
    with pytest.raises(sl.ConfigError):
        sl.ObjectiveKind("XYZ")
    with pytest.raises(sl.ConfigError):
        sl.ObjectiveKind("TLM", fula_weights=sl.FuLAWeights((1.0,)))
    fula = sl.ObjectiveKind.fula(mode="cutoff", n=2)
    w = fula.materialize(5, 9)
    assert w.c == (1 / 3, 1 / 3, 1 / 3, 0.0, 0.0)
    explicit = sl.ObjectiveKind.fula(weights=sl.FuLAWeights((0.5, 0.5)))
    with pytest.raises(sl.ConfigError):
        explicit.materialize(1, 9)  # wrong length for this tap pair


def test_at_mixture_alpha_extremes(micro_net):
    micro_net.eval()
    g = torch.Generator().manual_seed(8)
    x = torch.rand(6, 3, MICRO_RES, MICRO_RES, generator=g)
    y = torch.randint(0, 10, (6,), generator=g)
    attack = sl.AttackSpec(iters=2)

    def ce(xb, yb):
        return sl.tlm_loss(micro_net(xb), yb)

    clean_only = sl.at_mixture_loss(ce, micro_net, x, y, sl.ATConfig(0.0, attack))
    assert float(clean_only) == pytest.approx(float(ce(x, y)), rel=1e-6)

    g1 = torch.Generator().manual_seed(99)
    adv_only = sl.at_mixture_loss(ce, micro_net, x, y, sl.ATConfig(1.0, attack), generator=g1)
    g2 = torch.Generator().manual_seed(99)
    x_adv = sl.pgd_attack(micro_net, x, y, attack, generator=g2)
    assert float(adv_only) == pytest.approx(float(ce(x_adv, y)), rel=1e-6)

    g3 = torch.Generator().manual_seed(99)
    mixed = sl.at_mixture_loss(ce, micro_net, x, y, sl.ATConfig(0.5, attack), generator=g3)
    expected = 0.5 * float(ce(x, y)) + 0.5 * float(ce(x_adv, y))
    assert float(mixed) == pytest.approx(expected, rel=1e-6)


def test_gradients_match_finite_differences_quick(micro_pair):
    # Fuller 20-config sweep lives in the acceptance suite; this is a smoke check.
    front, end = micro_pair
    front, end = front.double(), end.double()
    front.eval(), end.eval()
    errs = _gradient_errors(front, end, tap=6, seed=0)
    assert max(errs.values()) < 1e-3, errs


def _gradient_errors(front, end, tap, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(3, 3, MICRO_RES, MICRO_RES, generator=g).double()
    y = torch.randint(0, 10, (3,), generator=g)
    errors = {}
    for kind in (sl.ObjectiveKind.slm(), sl.ObjectiveKind.tlm(),
                 sl.ObjectiveKind.hint(), sl.ObjectiveKind.fula()):
        layer = sl.StitchLayer(front.tap_shapes[tap][0], end.tap_shapes[tap][0],
                               in_tap=tap, out_tap=tap).double()
        layer.set_affine(torch.randn(layer.out_channels, layer.in_channels,
                                     generator=g, dtype=torch.float64) * 0.3,
                         torch.randn(layer.out_channels, generator=g, dtype=torch.float64) * 0.1)
        sm = sl.StitchedModel(front, end, layer, tap, tap)
        params = list(layer.parameters())
        loss = stitch_objective_loss(kind, sm, x, y,
                                     weights=kind.materialize(tap, end.num_taps))
        grads = torch.autograd.grad(loss, params)
        analytic = torch.cat([gr.flatten() for gr in grads])
        numeric = torch.empty_like(analytic)
        h = 1e-5
        flat_params = torch.cat([p.detach().flatten() for p in params])
        idx = 0
        for p in params:
            for k in range(p.numel()):
                with torch.no_grad():
                    orig = float(p.flatten()[k])
                    p.flatten()[k] = orig + h
                    up = float(stitch_objective_loss(kind, sm, x, y,
                                                     weights=kind.materialize(tap, end.num_taps)))
                    p.flatten()[k] = orig - h
                    down = float(stitch_objective_loss(kind, sm, x, y,
                                                       weights=kind.materialize(tap, end.num_taps)))
                    p.flatten()[k] = orig
                numeric[idx] = (up - down) / (2 * h)
                idx += 1
        rel = float(torch.linalg.vector_norm(numeric - analytic)
                    / (torch.linalg.vector_norm(analytic) + 1e-12))
        errors[kind.tag] = rel
    return errors
