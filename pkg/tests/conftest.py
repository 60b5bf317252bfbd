import numpy as np
import pytest

from deliberation.data import Utterance
from deliberation.firstpass import FirstPassConfig, build_encoder, run_first_pass, save_first_pass
from deliberation.training import SourcePool
from deliberation.world import World, WorldSpec, synth_features

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line: verdict(number, passed, detail)."""
    def record(number, passed, detail):
        _VERDICTS.append((number, bool(passed), detail))
        return passed
    return record


@pytest.fixture(scope="session")
def delib_setup(tmp_path_factory):
    """Untrained first pass checkpoint plus small audio and text pools."""
    out = tmp_path_factory.mktemp("delib")
    w = World(WorldSpec())
    rng = np.random.default_rng(0)
    fcfg = FirstPassConfig(prune_logp=None)
    enc = build_encoder(fcfg, 16, 64, seed=0)
    save_first_pass(out / "fp.ckpt", enc, fcfg, 0, 16, 64)
    utts = []
    for i in range(40):
        dom = w.spec.domains[i % 5]
        toks = w.encode(" ".join(rng.choice(w.head_words, size=rng.integers(1, 4)))).content
        frames = synth_features(w, toks, int(rng.integers(4)), 0.5, rng).frames
        utts.append(Utterance(f"s{i}", dom, tuple(toks), frames))
    encs, nbests = run_first_pass(enc, utts, fcfg)
    audio = SourcePool([u.tokens for u in utts], [u.domain for u in utts], [u.utt_id for u in utts],
                       encs, nbests, [u.frames for u in utts])
    tts = SourcePool([u.tokens for u in utts], [u.domain for u in utts], [f"t{i}" for i in range(len(utts))])
    pools = {"supervised": audio, "tts": tts, "semisup": audio}
    return out, enc, pools


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
