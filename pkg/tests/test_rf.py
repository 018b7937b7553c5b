"""Receptive-field recurrence and the gradient-based empirical estimate."""

import numpy as np
import pytest

from ssdfuse import arch as A
from ssdfuse import graph as G
from ssdfuse import rf
from ssdfuse.graph import LayerSpec, NetworkGraph


def chain(*specs, meta=None):
    layers = [LayerSpec("in", "input")]
    prev = "in"
    for i, s in enumerate(specs):
        name = f"l{i}"
        layers.append(LayerSpec(name, s.pop("kind"), (prev,), **s))
        prev = name
    return NetworkGraph(layers, taps=[prev],
                        meta=meta or {"input_size": 32, "in_channels": 1})


class TestTrfRecurrence:
    def test_single_conv3(self):
        g = chain(dict(kind="conv", out_channels=1, kernel=3, padding=1))
        rep = rf.compute_trf(g, "l0")
        assert rep.trf_size == 3.0
        assert rep.jump == 1.0

    def test_conv_then_pool_by_hand(self):
        # r: 1 -> 3 (conv3 s1) -> 4 (pool2 s2); jump: 1 -> 1 -> 2
        g = chain(dict(kind="conv", out_channels=1, kernel=3, padding=1),
                  dict(kind="max_pool", kernel=2, stride=2))
        rep = rf.compute_trf(g, "l1")
        assert rep.trf_size == 4.0
        assert rep.jump == 2.0

    def test_dilation_doubles_growth(self):
        g1 = chain(dict(kind="conv", out_channels=1, kernel=3, padding=1))
        g2 = chain(dict(kind="conv", out_channels=1, kernel=3, padding=2,
                        dilation=2))
        r1 = rf.compute_trf(g1, "l0").trf_size
        r2 = rf.compute_trf(g2, "l0").trf_size
        assert r1 - 1 == 2.0
        assert r2 - 1 == 4.0

    def test_conv4_3_is_92_jump_8(self, baseline_graph):
        rep = rf.compute_trf(baseline_graph, "relu4_3")
        assert rep.trf_size == 92.0
        assert rep.jump == 8.0
        assert rep.grid_scale == pytest.approx(300 / 38)

    def test_monotone_along_trunk(self, baseline_graph):
        stats = rf.compute_trf(baseline_graph, "relu_fc7").layers
        order = ["conv1_1", "conv2_2", "conv3_3", "conv4_3", "conv5_3", "fc7"]
        sizes = [stats[n].trf_size for n in order]
        assert sizes == sorted(sizes)

    def test_unknown_tap_rejected(self, baseline_graph):
        with pytest.raises(ValueError, match="ghost"):
            rf.compute_trf(baseline_graph, "ghost")


class TestTrfGain:
    def test_identical_graphs(self, baseline_graph):
        assert rf.trf_gain(baseline_graph, baseline_graph, "relu4_3") == 1.0

    def test_dilation_module_gain(self, baseline_graph, fused_graph):
        rep = rf.compute_trf(fused_graph, "dil_bn2")
        assert rep.trf_size == 140.0  # 92 + 2*1*8 + 2*2*8
        gain = rf.trf_gain(baseline_graph, fused_graph, "relu4_3", "dil_bn2")
        assert gain == pytest.approx(140 / 92)

    def test_plain_conv_gain(self, toy_cfg, baseline_graph):
        g = A.build_ablation("plain_fc7", toy_cfg)
        rep = rf.compute_trf(g, "dil_bn2")
        assert rep.trf_size == 124.0  # two d=1 convs add 16 each
        gain = rf.trf_gain(baseline_graph, g, "relu4_3", "dil_bn2")
        assert gain == pytest.approx(124 / 92)

    def test_all_fusion_variants_gain_above_one(self, toy_cfg, baseline_graph):
        shallow_tap = {"plain_conv5": "dil_bn2", "plain_fc7": "dil_bn2",
                       "dilated_fc7": "dil_bn1", "fused": "dil_bn2"}
        for variant, tap in shallow_tap.items():
            g = A.build_ablation(variant, toy_cfg)
            assert rf.trf_gain(baseline_graph, g, "relu4_3", tap) > 1.0


class TestErf:
    def test_1x1_network_diameter_one(self):
        g = chain(dict(kind="conv", out_channels=2, kernel=1),
                  dict(kind="conv", out_channels=1, kernel=1),
                  meta={"input_size": 9, "in_channels": 1})
        params = G.init_params(g, 0, (1, 1, 9, 9))
        est = rf.estimate_erf(g, params, "l1", n_samples=4)
        assert est.diameter == 1
        assert est.mask.sum() == 1

    def test_mask_within_trf_support(self):
        g = chain(dict(kind="conv", out_channels=3, kernel=3, padding=1),
                  dict(kind="relu"),
                  dict(kind="conv", out_channels=3, kernel=3, padding=1),
                  dict(kind="relu"),
                  dict(kind="conv", out_channels=2, kernel=3, padding=1),
                  meta={"input_size": 21, "in_channels": 1})
        params = G.init_params(g, 3, (1, 1, 21, 21))
        est = rf.estimate_erf(g, params, "l4", n_samples=8)
        h0, h1, w0, w1 = est.trf_box
        ys, xs = np.nonzero(est.mask)
        assert ys.min() >= h0 and ys.max() <= h1
        assert xs.min() >= w0 and xs.max() <= w1

    def test_effective_smaller_than_theoretical(self):
        # at the 0.02 threshold the shrinkage emerges from depth ~10: the
        # path count into border pixels decays like the inverse central
        # trinomial, whose square root crosses 2% only past depth 8
        specs = []
        for _ in range(10):
            specs.append(dict(kind="conv", out_channels=4, kernel=3, padding=1))
            specs.append(dict(kind="relu"))
        g = chain(*specs, meta={"input_size": 41, "in_channels": 1})
        tap = g.taps[0]
        params = G.init_params(g, 5, (1, 1, 41, 41))
        rep = rf.compute_trf(g, tap)
        est = rf.estimate_erf(g, params, tap, n_samples=8)
        assert rep.trf_size == 21.0
        assert est.diameter < rep.trf_size

    def test_report_text_has_all_taps(self, baseline_graph):
        text = rf.report_text(baseline_graph, list(baseline_graph.taps))
        for t in baseline_graph.taps:
            assert t in text
