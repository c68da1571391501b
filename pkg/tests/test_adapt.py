import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epalm import autodiff as ad
from epalm.adapt import (DECODER_PRESETS, ENCODER_PRESETS, EPALM, GROUPS, VARIANT_NAMES, Adapter,
                         AdapterSpec, Connection, InjectionSchedule, PromptSpec, VariantSpec,
                         average_frame_cls, build_schedule, count_params, count_params_for,
                         default_k, input_schedule, param_shapes, project_cls, variant_spec)
from epalm.autodiff import RngState, Tensor
from epalm.nn import Decoder, DecoderConfig, Encoder, EncoderConfig

from conftest import tiny_backbones, tiny_model


# -- schedules -----------------------------------------------------------------

def test_build_schedule_examples():
    s = build_schedule(12, 24, 6, 2)
    assert s.encoder_layers == [6, 7, 8, 9, 10, 11]
    assert s.decoder_layers == [12, 14, 16, 18, 20, 22]
    assert build_schedule(12, 32, 6, 2).decoder_layers == [20, 22, 24, 26, 28, 30]
    s = build_schedule(4, 4, 1, 2)
    assert s.encoder_layers == [3] and s.decoder_layers == [2]


def test_build_schedule_infeasible():
    with pytest.raises(ValueError):
        build_schedule(12, 10, 6, 2)
    with pytest.raises(ValueError):
        build_schedule(4, 24, 6, 2)


def test_schedule_must_increase():
    with pytest.raises(ValueError):
        InjectionSchedule(((1, 2), (1, 4)))
    with pytest.raises(ValueError):
        InjectionSchedule(((1, 4), (2, 4)))
    with pytest.raises(ValueError):
        InjectionSchedule(())


def test_input_schedule_and_default_k():
    assert input_schedule(6).pairs == ((5, 0),)
    assert default_k(12, 32) == 6
    assert default_k(4, 6) == 3
    assert default_k(2, 2) == 1


# -- connections, prompts, adapters ---------------------------------------------

def _trace(rng, n=4, d=16, B=2):
    return [Tensor(rng.standard_normal((B, d)).astype(np.float32)) for _ in range(n)]


def test_shared_connection_reuses_weights(rng):
    conn = Connection("shared", 3, 16, 24, rng)
    assert all(conn.layer_for(k) is conn.layer_for(0) for k in range(3))
    assert len(conn.parameters()) == 2


def test_project_zero_cls_gives_bias(rng):
    conn = Connection("per_level", 2, 16, 24, rng)
    conn.proj[1].bias.data[:] = rng.standard_normal(24)
    sched = build_schedule(4, 6, 2, 2)
    trace = [Tensor(np.zeros((1, 16), dtype=np.float32)) for _ in range(4)]
    assert np.allclose(project_cls(conn, trace, sched, 1).data[0], conn.proj[1].bias.data)


def test_per_level_isolation(rng):
    conn = Connection("per_level", 3, 16, 24, rng)
    sched = build_schedule(4, 6, 3, 2)
    trace = _trace(rng)
    before = project_cls(conn, trace, sched, 1).data.copy()
    conn.proj[0].weight.data += 1.0
    conn.proj[2].weight.data += 1.0
    assert np.array_equal(project_cls(conn, trace, sched, 1).data, before)
    with pytest.raises(IndexError):
        project_cls(conn, trace, sched, 3)


def test_adapter_zero_up_is_identity(rng):
    a = Adapter(16, 8, rng)
    a.up.weight.data[:] = 0.0
    h = Tensor(rng.standard_normal((2, 5, 16)).astype(np.float32))
    out = a(h)
    assert out.shape == h.shape and np.array_equal(out.data, h.data)
    with pytest.raises(ValueError):
        Adapter(12, 8, rng)


def test_adapter_param_count_formula():
    shapes = param_shapes(variant_spec("EPALM_ADA"), ENCODER_PRESETS["vit_b"], DECODER_PRESETS["opt2b7"])
    per = sum(int(np.prod(s)) for n, s in shapes.items() if n.startswith("adapters.0.after_attn."))
    assert per == 2 * (2560 * 320) + 320 + 2560


def test_soft_prompt_with_mlp_shape(rng):
    model = tiny_model("EPALM_PT")
    assert model.prompt_state().shape == (10, 16)
    assert model.prompt.mlp[0].weight.shape == (16, 16)


def test_average_frame_cls(rng):
    t = _trace(rng)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(average_frame_cls([t]), t))
    neg = [Tensor(-x.data) for x in t]
    assert all(np.allclose(a.data, 0.0) for a in average_frame_cls([t, neg]))
    u = _trace(rng)
    ab, ba = average_frame_cls([t, u]), average_frame_cls([u, t])
    assert all(np.allclose(a.data, b.data) for a, b in zip(ab, ba))
    with pytest.raises(ValueError):
        average_frame_cls([])


# -- variants ---------------------------------------------------------------------

EXPECTED_GROUPS = {
    "EPALM_LIN": {"connection"},
    "EPALM_PT": {"connection", "prompt"},
    "EPALM": {"connection", "prompt"},
    "EPALM_ADA": {"connection", "adapters"},
    "DEEP_PT": {"connection", "prompt"},
    "B_PROMPTFUSE": {"connection", "prompt"},
    "B_LIMBER": {"connection"},
    "B_MAGMA": {"connection", "adapters"},
    "TEXT_ONLY": {"prompt"},
    "FULL_FT": {"connection", "prompt", "encoder", "decoder"},
}


@pytest.mark.parametrize("name", VARIANT_NAMES)
def test_trainable_set_matches_declaration(name):
    model = tiny_model(name, scale=0)
    assert variant_spec(name).declared_groups() == EXPECTED_GROUPS[name]
    for pname, p in model.named_parameters():
        head = "prompt" if pname.startswith("deep_prompts") else pname.split(".")[0]
        assert p.trainable == (head in EXPECTED_GROUPS[name]), pname


def test_limber_trains_exactly_one_projection():
    model = tiny_model("B_LIMBER", scale=0)
    names = sorted(n for n, p in model.named_parameters() if p.trainable)
    assert names == ["connection.proj.0.bias", "connection.proj.0.weight"]


def test_epalm_logits_depend_on_perception(rng):
    enc, dec = tiny_backbones(n_enc=4, n_dec=4)
    model = EPALM(variant_spec("EPALM", k=1), enc, dec, RngState(0).generator(3))
    text = EPALM(variant_spec("TEXT_ONLY"), None, dec, RngState(0).generator(3))
    model.astype(np.float64)
    text.astype(np.float64)
    ids = rng.integers(0, 20, (1, 4))
    perc = rng.standard_normal((1, 9, 10))
    a = model(perc, ids).data
    assert not np.allclose(a, text(None, ids).data)
    perc2 = rng.standard_normal((1, 9, 10))
    assert not np.allclose(a, model(perc2, ids).data)


def test_slot_holds_projection_after_each_injection(rng):
    model = tiny_model("EPALM")
    perc = rng.standard_normal((2, 9, 10))
    probe = {}
    model(perc, rng.integers(0, 20, (2, 5)), probe=probe)
    trace = model.encode(perc)
    for k, j in enumerate(model.schedule.decoder_layers):
        expected = project_cls(model.connection, trace, model.schedule, k).data
        assert np.allclose(probe["slots"][j][:, 0], expected)
    assert max(l.slot_len for l in probe["layouts"]) == 1


def test_baselines_inject_at_input(rng):
    for name in ("B_PROMPTFUSE", "B_LIMBER", "B_MAGMA"):
        model = tiny_model(name)
        assert model.schedule.pairs == ((3, 0),)
        probe = {}
        model(rng.standard_normal((1, 9, 10)), rng.integers(0, 20, (1, 3)), probe=probe)
        assert all(l.slot_len == 1 for l in probe["layouts"])


def test_magma_all_tokens_ablation(rng):
    model = tiny_model("B_MAGMA", overrides={"all_tokens": True})
    probe = {}
    model(rng.standard_normal((1, 9, 10)), rng.integers(0, 20, (1, 3)), probe=probe)
    assert probe["layouts"][0].slot_len == 10


def test_frame_average_of_identical_frames_equals_single(rng):
    single = tiny_model("EPALM")
    frames = tiny_model("EPALM", overrides={"frame_mode": "average_cls"})
    frame = rng.standard_normal((1, 9, 10))
    ids = rng.integers(0, 20, (1, 4))
    stack = np.repeat(frame[:, None], 3, axis=1)
    assert np.allclose(single(frame, ids).data, frames(stack, ids).data, atol=1e-12)


def test_deep_prompt_count_and_length(rng):
    model = tiny_model("DEEP_PT")
    n = sum(p.data.size for n_, p in model.named_parameters() if n_.startswith("deep_prompts"))
    assert n == 6 * 10 * 16
    probe = {}
    model(rng.standard_normal((1, 9, 10)), rng.integers(0, 20, (1, 3)), probe=probe)
    assert max(l.length for l in probe["layouts"]) == 10 + 1 + 3


def test_deep_prompt_gradients_reach_every_layer(rng):
    model = tiny_model("DEEP_PT")
    model(rng.standard_normal((1, 9, 10)), rng.integers(0, 20, (1, 3))).sum().backward()
    for p in model.deep_prompts:
        assert p.grad is not None and np.abs(p.grad).sum() > 0


def test_gradient_reaches_connection_through_frozen_decoder(rng):
    model = tiny_model("EPALM_LIN")
    ids = rng.integers(0, 20, (2, 5))
    ad.cross_entropy(model(rng.standard_normal((2, 9, 10)), ids), ids).backward()
    assert np.abs(model.connection.proj[0].weight.grad).sum() > 0
    assert all(p.grad is None for p in model.decoder.parameters())


def test_text_only_needs_no_perception(rng):
    model = tiny_model("TEXT_ONLY")
    assert model.encoder is None
    assert model(None, rng.integers(0, 20, (1, 3))).shape == (1, 3, 20)


def test_variant_spec_roundtrip_and_unknown():
    for name in VARIANT_NAMES:
        spec = variant_spec(name)
        assert VariantSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        variant_spec("EPALM_XL")


# -- token count invariant ---------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(2, 10), st.integers(1, 4), st.integers(1, 3), st.integers(1, 6))
def test_plus_one_token_invariant(n_enc, n_dec, k, stride, T):
    if k > n_enc or k * stride > n_dec:
        return
    rng = RngState(n_enc * 100 + n_dec).generator(0)
    enc = Encoder(EncoderConfig(n_enc, 8, 2, 16, 4, 5), rng)
    dec = Decoder(DecoderConfig(n_dec, 8, 2, 16, 12, 32), rng)
    model = EPALM(variant_spec("EPALM", k=k, stride=stride), enc, dec, rng)
    probe = {}
    model(rng.standard_normal((1, 4, 5)), rng.integers(0, 12, (1, T)), probe=probe)
    lengths = [l.length for l in probe["layouts"]]
    first = model.schedule.decoder_layers[0]
    assert max(lengths) == 10 + 1 + T
    assert all(n == 10 + T for n in lengths[:first])
    assert all(n == 10 + 1 + T for n in lengths[first:])


# -- budgets ---------------------------------------------------------------------------

def test_live_count_matches_analytic():
    for name in VARIANT_NAMES:
        model = tiny_model(name, scale=0)
        enc_cfg = model.encoder.config if model.encoder is not None else tiny_backbones()[0].config
        live = count_params(model)
        analytic = count_params_for(variant_spec(name), enc_cfg, model.decoder.config)
        if name == "TEXT_ONLY":
            # the live model drops its encoder; the analytic count includes it as frozen
            assert live.trainable_count == analytic.trainable_count
        else:
            assert live.trainable_count == analytic.trainable_count
            assert live.frozen_count == analytic.frozen_count


def test_shared_connection_count():
    b = count_params_for(variant_spec("EPALM_LIN"), ENCODER_PRESETS["vit_b"], DECODER_PRESETS["opt2b7"])
    assert b.trainable_count == 768 * 2560 + 2560 == 1_968_640


def test_budget_monotone_over_variants():
    e, d = ENCODER_PRESETS["vit_b"], DECODER_PRESETS["opt2b7"]
    counts = [count_params_for(variant_spec(n), e, d).trainable_count
              for n in ("EPALM_LIN", "EPALM_PT", "EPALM", "EPALM_ADA")]
    assert counts == sorted(counts) and len(set(counts)) == 4


def test_budget_groups_and_fraction():
    b = count_params_for(variant_spec("EPALM"), ENCODER_PRESETS["vit_b"], DECODER_PRESETS["opt2b7"])
    d = b.to_dict()
    assert set(d["groups"]) <= set(GROUPS)
    assert sum(g["trainable"] for g in d["groups"].values()) == d["trainable"]
    assert 0 < b.fraction <= 1
