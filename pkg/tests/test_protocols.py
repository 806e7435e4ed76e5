import numpy as np
import pytest

from bbqram.program import AddressBusInput, Direction, Phase, Program, Routing, validate
from bbqram.protocols import (
    compile_high_bandwidth, compile_hybrid_parallel, compile_nonparallel, compile_parallel,
    compile_protocol, step_report,
)
from bbqram.topology import Scheme, TreeSpec


def total(protocol, n, k, c=1, m=0):
    return compile_protocol(protocol, TreeSpec(n, k, Scheme.QUTRIT, c), m).n_ticks


def test_nonparallel_examples():
    assert 32 <= total("nonparallel", 4, 3) <= 48
    rep = step_report(compile_nonparallel(TreeSpec(2, 1)))
    assert rep.address_setting == 5
    assert rep.total == rep.address_setting + rep.data_fetch + rep.uncomputing


@pytest.mark.parametrize("n", range(1, 9))
def test_address_setting_is_3n_minus_1(n):
    for proto in ("nonparallel", "parallel"):
        rep = step_report(compile_protocol(proto, TreeSpec(n, 2)))
        assert rep.address_setting == rep.uncomputing == 3 * n - 1


def test_closed_forms():
    for n in range(2, 13):
        for k in range(2, 13):
            assert total("nonparallel", n, k) == 2 * n * k + 6 * n - 1
            assert total("parallel", n, k) == 8 * n + 2 * k - 3


def test_parallel_fig4_shape():
    prog = compile_parallel(TreeSpec(4, 3))
    t = next(i for i, s in enumerate(prog.steps) if AddressBusInput(3) in s.ops)
    assert any(isinstance(op, Routing) and op.layer == 1 and op.direction is Direction.DOWN
               for op in prog.steps[t].ops)
    assert any(isinstance(op, Routing) and op.direction is Direction.BI
               for s in prog.steps for op in s.ops)


def test_parallel_affine_and_monotone():
    ns, ks, ts = [], [], []
    for n in range(2, 13):
        for k in range(2, 13):
            ns.append(n)
            ks.append(k)
            ts.append(total("parallel", n, k))
    X = np.column_stack([ns, ks, np.ones(len(ns))])
    coef, *_ = np.linalg.lstsq(X, np.array(ts, dtype=float), rcond=None)
    assert np.allclose(X @ coef, ts, atol=1e-9)
    assert np.isclose(coef[1], 2.0)
    for n in range(2, 8):
        for k in range(2, 8):
            assert total("parallel", n, k + 1) - total("parallel", n, k) == 2
            assert total("parallel", n + 1, k) >= total("parallel", n, k)
            assert total("parallel", n, k) < total("nonparallel", n, k)


def test_high_bandwidth_examples():
    fetch = lambda p: step_report(p).data_fetch  # noqa: E731
    assert fetch(compile_high_bandwidth(TreeSpec(4, 4, Scheme.QUTRIT, 4))) == fetch(compile_parallel(TreeSpec(4, 1)))
    assert total("hb-parallel", 4, 8, 2) < total("parallel", 4, 8)
    assert compile_high_bandwidth(TreeSpec(3, 3)).steps == compile_parallel(TreeSpec(3, 3)).steps
    with pytest.raises(ValueError):
        compile_high_bandwidth(TreeSpec(4, 8, Scheme.QUTRIT, 3))


def test_hybrid_growth_per_series():
    # each extra digit in flight costs two ticks, so 2^m more series add 2 * 2^m * k ticks
    for n in range(2, 7):
        for k in range(2, 7):
            for m in range(1, 5):
                diff = total("hybrid-parallel", n, k, m=m + 1) - total("hybrid-parallel", n, k, m=m)
                assert diff == 2 ** (m + 1) * k


def test_argument_errors():
    with pytest.raises(ValueError):
        compile_hybrid_parallel(TreeSpec(2, 1), 0)
    with pytest.raises(ValueError):
        compile_nonparallel(TreeSpec(2, 2, Scheme.QUTRIT, 2))
    with pytest.raises(ValueError):
        compile_parallel(TreeSpec(2, 2, Scheme.QUTRIT, 2))
    with pytest.raises(ValueError):
        compile_protocol("quantum-walk", TreeSpec(2, 2))


def test_empty_program_report():
    rep = step_report(Program(TreeSpec(2, 1), "empty", ()))
    assert (rep.total, rep.address_setting, rep.data_fetch, rep.uncomputing) == (0, 0, 0, 0)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_phases_in_order_and_uncompute_mirrors(scheme):
    for proto, c, m in (("nonparallel", 1, 0), ("parallel", 1, 0), ("hb-parallel", 2, 0), ("hybrid-parallel", 1, 2)):
        prog = compile_protocol(proto, TreeSpec(3, 4, scheme, c), m)
        assert validate(prog) == []
        phases = [s.phase for s in prog.steps]
        assert phases == sorted(phases, key=[Phase.ADDRESS_SETTING, Phase.DATA_FETCH, Phase.UNCOMPUTING].index)
        rep = step_report(prog)
        assert rep.address_setting == rep.uncomputing


def test_compilation_is_deterministic():
    a = compile_protocol("hybrid-parallel", TreeSpec(3, 3), 2)
    b = compile_protocol("hybrid-parallel", TreeSpec(3, 3), 2)
    assert a.to_json() == b.to_json()
