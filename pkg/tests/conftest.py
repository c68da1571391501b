import numpy as np
import pytest

from epalm.adapt import EPALM, variant_spec
from epalm.autodiff import RngState
from epalm.nn import Decoder, DecoderConfig, Encoder, EncoderConfig

V_TINY = 20


def tiny_backbones(n_enc=4, n_dec=6, d=16, seed=0, dtype=np.float64, n_patches=9, feat=10, vocab=V_TINY,
                   max_positions=48):
    rng = RngState(seed)
    enc = Encoder(EncoderConfig(n_enc, d, 2, 2 * d, n_patches, feat), rng.generator(1))
    dec = Decoder(DecoderConfig(n_dec, d, 2, 2 * d, vocab, max_positions), rng.generator(2))
    for m in (enc, dec):
        m.assign_names()
        m.astype(dtype)
    return enc, dec


def tiny_model(name="EPALM", seed=0, scale=0.3, **kw):
    overrides = kw.pop("overrides", {})
    enc, dec = tiny_backbones(seed=seed, **kw)
    model = EPALM(variant_spec(name, **overrides), enc, dec, RngState(seed).generator(3))
    model.astype(dec.tok_emb.dtype)
    if scale:
        rng = RngState(seed).generator(4)
        for p in model.parameters():
            p.data = p.data + scale * rng.standard_normal(p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance report ------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
