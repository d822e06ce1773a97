import numpy as np
import pytest

from voxagent.agent import AgentConfig, AgentNet, build_vocab
from voxagent.runtime import (
    Call,
    DslSyntaxError,
    Encodings,
    Env,
    Executor,
    FeedbackItem,
    Mask,
    ModSlot,
    ModelPolicy,
    Num,
    Number,
    OraclePolicy,
    Stmt,
    Str,
    Text,
    Var,
    Volume,
    VolumeInput,
    agent_loop,
    embed_feedback,
    format_number,
    format_program,
    parse,
    parse_transcript,
    save_transcript,
)
from voxagent.visionnet import NetConfig, VisionNet
from voxagent.voxelcore import BinaryMask, VoxelGrid, read_volume, roi_report, spacing_affine

SHAPE = (10, 10, 10)
AFF = spacing_affine(SHAPE, (1.0, 1.0, 1.0))


def _mask(n):
    v = np.zeros(SHAPE, dtype=bool)
    v.reshape(-1)[:n] = True
    return BinaryMask(v, AFF)


def _vol(seed=0):
    return VoxelGrid(np.random.default_rng(seed).random(SHAPE).astype(np.float32), AFF)


def _vocab(*texts):
    return build_vocab(list(texts) + ["The lesion volume changed by mm3", "error undefined variable"])


# parsing --------------------------------------------------------------------

def test_parse_assignment_with_mod():
    p = parse("e = encode(v1, <MOD>)")
    assert p.statements == (Stmt(Call("encode", (Var("v1"), ModSlot(0))), "e", 1),)


def test_parse_bare_call():
    (s,) = parse("read(e)").statements
    assert s.target is None and s.call == Call("read", (Var("e"),))


def test_parse_unclosed_paren():
    with pytest.raises(DslSyntaxError) as exc:
        parse("x = volume_of(m")
    assert exc.value.line == 1 and exc.value.col >= 15


def test_parse_literals_and_ordinals():
    p = parse('a = encode(v1, <MOD>, v2, <MOD>)\nm = segment(a, <MOD>)\nrespond("x {0}\\n", 2.5, -3)')
    assert p.mod_count == 3
    assert [a.ordinal for s in p.statements for a in s.call.args if isinstance(a, ModSlot)] == [0, 1, 2]
    assert p.statements[2].call.args == (Str("x {0}\n"), Num(2.5), Num(-3.0))
    assert p.statements[2].line == 3
    assert parse(format_program(p)) == p


def test_parse_errors_report_position():
    with pytest.raises(DslSyntaxError) as exc:
        parse("a = read(e)\nb = = c()")
    assert exc.value.line == 2
    with pytest.raises(DslSyntaxError):
        parse("A = read(e)")


def test_empty_program():
    assert len(parse("")) == 0 and len(parse("  \n# note\n")) == 0


# execution ------------------------------------------------------------------

def test_volume_of_matches_roi_report():
    env = Env({"m": Mask(_mask(120))})
    out = Executor().execute(parse("x = volume_of(m)"), env, [])
    assert out.ok
    expected = roi_report(VoxelGrid(np.ones(SHAPE, np.float32), AFF), _mask(120)).volume_mm3
    assert env["x"] == Number(expected, "mm3") and expected == pytest.approx(120.0)


def test_respond_formats_one_decimal():
    env = Env({"n": Number(50, "mm3")})
    out = Executor().execute(parse('respond("growth is {0} mm3", n)'), env, [])
    assert out.answer == "growth is 50.0 mm3" and out.complete


def test_phi_mismatch_leaves_env_unchanged():
    env = Env({"v1": Volume(_vol(), "v1")})
    before = env.names()
    out = Executor().execute(parse("e = encode(v1, <MOD>)"), env, [])
    assert not out.ok and "mismatch" in out.error
    assert env.names() == before


@pytest.mark.parametrize(
    "code,needle",
    [
        ("x = volume_of(nope)", "undefined variable"),
        ("x = volume_of(v1)", "must be Mask"),
        ("x = frobnicate(v1)", "unknown function"),
        ("x = add(a, b, a)", "takes 2 arguments"),
        ('respond("{1}", a)', "no argument"),
        ("x = div(a, z)", "division by zero"),
    ],
)
def test_errors_become_feedback(code, needle):
    env = Env({"v1": Volume(_vol(), "v1"), "a": Number(1.0), "b": Number(2.0), "z": Number(0.0)})
    out = Executor().execute(parse(code), env, [])
    assert not out.ok and needle in out.error
    assert out.feedback[-1].error and needle in out.feedback[-1].rendering


def test_arithmetic_units():
    env = Env({"a": Number(10.0, "mm3"), "b": Number(4.0, "mm3"), "k": Number(2.0)})
    ex = Executor()
    assert ex.execute(parse("x = sub(a, b)\ny = div(a, b)\nw = mul(a, k)"), env, []).ok
    assert env["x"] == Number(6.0, "mm3") and env["y"] == Number(2.5, "") and env["w"] == Number(20.0, "mm3")
    assert not ex.execute(parse("q = add(a, k)"), Env({"a": Number(1, "mm3"), "k": Number(1, "mm")}), []).ok


def test_mask_ops_and_metrics():
    vol = _vol(1)
    m = _mask(300)
    env = Env({"v": Volume(vol, "v"), "m": Mask(m)})
    out = Executor().execute(
        parse("a = mask_apply(v, m)\nr = mask_remove(v, m)\nc = crop_to(v, m, 1)\nmu = mean_in(v, m)\nx = extents_of(m)"),
        env,
        [],
    )
    assert out.ok, out.error
    np.testing.assert_allclose(env["a"].grid.values + env["r"].grid.values, vol.values)
    assert env["mu"].value == pytest.approx(vol.values[m.values].mean(), rel=1e-5)
    assert env["c"].grid.shape[0] <= SHAPE[0]
    assert env["x"].is_triple


def test_env_persistence_and_rebinding():
    env = Env({"a": Number(1.0)})
    ex = Executor()
    ex.execute(parse("b = add(a, a)"), env, [])
    ex.execute(parse("c = add(b, a)"), env, [])
    assert env["c"].value == 3.0
    ex.execute(parse("a = add(c, c)"), env, [])
    assert env.names() == ["b", "c", "a"] and env["a"].value == 6.0


def test_execution_deterministic():
    net = VisionNet(NetConfig(levels=2, top_channels=4, deep_channels=4, attn_dim=2, summary_dim=6, phi_dim=3), seed=0)
    phis = [np.full(3, 0.3, np.float32), np.full(3, -0.2, np.float32)]

    def run():
        env = Env({"v1": Volume(_vol(2), "v1")})
        Executor(net).execute(parse("e = encode(v1, <MOD>)\nm = segment(e, <MOD>)"), env, phis)
        return env["e"].enc.summary.numpy(), env["m"].prob.prob.numpy()

    (s1, p1), (s2, p2) = run(), run()
    assert np.array_equal(s1, s2) and np.array_equal(p1, p2)


# feedback -------------------------------------------------------------------

def test_feedback_two_streams_pass_vectors():
    net = VisionNet(NetConfig(levels=2, top_channels=4, deep_channels=4, attn_dim=2, summary_dim=6, phi_dim=3))
    env = Env({"v1": Volume(_vol(3), "v1"), "v2": Volume(_vol(4), "v2")})
    out = Executor(net).execute(parse("e = encode(v1, <MOD>, v2, <MOD>)\nread(e)"), env, [np.zeros(3)] * 2)
    block = embed_feedback(out.feedback, _vocab())
    assert len(block) == 2 and block.segments[0].shape == (2, 6)


def test_feedback_number_rendering_and_order():
    v = _vocab()
    items = [FeedbackItem(Number(12.5, "mm3"), Number(12.5, "mm3").render()), FeedbackItem(Text("ok"), "ok")]
    block = embed_feedback(items, v)
    assert block.rendering == ["12.5 mm3", "ok"]
    assert block.segments == [tuple(v.tokenize("12.5 mm3")), tuple(v.tokenize("ok"))]
    assert format_number(49.96) == "50.0" and format_number(-0.01) == "0.0"


def test_encodings_render():
    net = VisionNet(NetConfig(levels=2, top_channels=4, deep_channels=4, attn_dim=2, summary_dim=6, phi_dim=3))
    enc = net.encode([_vol()], [np.zeros(3)])
    assert Encodings(enc).render() == "<1 encoding vectors>"


# loop -----------------------------------------------------------------------

LONGITUDINAL = [
    "e1 = encode(v1, <MOD>)\ne2 = encode(v2, <MOD>)\nread(e1)\nread(e2)",
    "m1 = segment(e1, <MOD>)\nm2 = segment(e2, <MOD>)\na = volume_of(m1)\nb = volume_of(m2)\ng = sub(b, a)\nread(g)",
    'respond("The lesion volume changed by {0} mm3.", g)',
]


def _longitudinal_loop(max_len=4096):
    vols = [VolumeInput("v1", _vol(0)), VolumeInput("v2", _vol(1), date="2024-07-01")]
    vocab = _vocab(*LONGITUDINAL)
    ex = Executor(oracle_masks=[_mask(100), _mask(150)])
    return agent_loop("How much did the lesion grow?", vols, OraclePolicy(LONGITUDINAL, vocab), vocab, ex, max_len=max_len), vocab


def test_oracle_longitudinal_answer():
    tr, _ = _longitudinal_loop()
    assert tr.complete and tr.valid
    assert "50.0" in tr.answer
    assert tr.answer == "The lesion volume changed by 50.0 mm3."
    assert [name for name, _ in tr.masks] == ["m1", "m2"]


def test_state_length_identity():
    tr, _ = _longitudinal_loop()
    for a, b in zip(tr.steps, tr.steps[1:]):
        assert b.state_len == a.state_len + a.eta_len + a.z_len
    last = tr.steps[-1]
    assert tr.final_state_len == last.state_len + last.eta_len + last.z_len


def test_error_step_continues():
    steps = ["x = volume_of(nope)", "stop()"]
    vocab = _vocab(*steps)
    tr = agent_loop("p", [VolumeInput("v1", _vol())], OraclePolicy(steps, vocab), vocab)
    assert "undefined variable" in tr.steps[0].outcome
    assert "undefined variable" in tr.steps[0].feedback[0]
    assert tr.complete and not tr.valid and tr.answer is None


def test_syntax_error_step_continues():
    steps = ["x = volume_of(", "stop()"]
    vocab = _vocab(*steps)
    tr = agent_loop("p", [], OraclePolicy(steps, vocab), vocab)
    assert tr.steps[0].outcome.startswith("error: syntax")
    assert tr.complete


def test_incomplete_after_max_steps():
    steps = ["a = add(1, 2)"] * 8
    vocab = _vocab(*steps)
    tr = agent_loop("p", [], OraclePolicy(steps, vocab), vocab, max_steps=8)
    assert len(tr.steps) == 8 and not tr.complete and tr.answer is None


def test_overflow_stops_loop():
    tr, _ = _longitudinal_loop(max_len=40)
    assert tr.overflow and not tr.complete


def test_model_policy_runs():
    vocab = _vocab(*LONGITUDINAL)
    net = AgentNet(vocab.size, AgentConfig(layers=1, d_model=16, heads=2, ffn=16, max_len=512, step_cap=8, phi_dim=3))
    tr = agent_loop("p", [VolumeInput("v1", _vol())], ModelPolicy(net, vocab), vocab, max_steps=3, max_len=512)
    assert 1 <= len(tr.steps) <= 3


def test_transcript_roundtrip(tmp_path):
    tr, _ = _longitudinal_loop()
    path = save_transcript(tr, tmp_path, stem="t")
    parsed = parse_transcript(path.read_text())
    assert parsed["answer"] == tr.answer and parsed["complete"]
    assert [s["code"] for s in parsed["steps"]] == LONGITUDINAL
    assert [s["phi_count"] for s in parsed["steps"]] == [2, 2, 0]
    assert [s["feedback"] for s in parsed["steps"]] == [s.feedback for s in tr.steps]
    for name, fname in parsed["masks"]:
        m = read_volume(tmp_path / fname)
        assert int(np.asarray(m.values).astype(bool).sum()) in (100, 150)
