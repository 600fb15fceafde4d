"""Reference feeders used by the studies, bundled scenarios and tests.

Impedances are typical 12.47 kV overhead values (ohms per mile) scaled by
section length; loads are given in VA per phase.
"""

from __future__ import annotations

import numpy as np

from .model import FeederModel, LineBranch, Load, Meter, SwitchBranch, TransformerBranch

V_LN_12KV = 12470.0 / np.sqrt(3.0)

OVERHEAD_Z_PER_MILE = np.array(
    [
        [0.4576 + 1.0780j, 0.1560 + 0.5017j, 0.1535 + 0.3849j],
        [0.1560 + 0.5017j, 0.4666 + 1.0482j, 0.1580 + 0.4236j],
        [0.1535 + 0.3849j, 0.1580 + 0.4236j, 0.4615 + 1.0651j],
    ]
)


def overhead_line(miles: float) -> np.ndarray:
    return OVERHEAD_Z_PER_MILE * miles


def random_line_impedance(rng: np.random.Generator, miles: tuple[float, float] = (0.5, 2.0)) -> np.ndarray:
    """Symmetric, diagonally dominant 3x3 impedance with randomised entries."""
    length = rng.uniform(*miles)
    r_self = rng.uniform(0.3, 0.6, 3)
    x_self = rng.uniform(0.8, 1.3, 3)
    z = np.diag(r_self + 1j * x_self).astype(complex)
    for i, j in ((0, 1), (1, 2), (0, 2)):
        m = rng.uniform(0.08, 0.2) + 1j * rng.uniform(0.3, 0.55)
        z[i, j] = z[j, i] = m
    return z * length


def random_transformer_impedance(rng: np.random.Generator, z_base: float) -> np.ndarray:
    r = rng.uniform(0.008, 0.02, 3)
    x = rng.uniform(0.04, 0.08, 3)
    return np.diag((r + 1j * x) * z_base)


def two_bus_line(z: np.ndarray | None = None, load_va=None, v_ln: float = V_LN_12KV) -> FeederModel:
    """Source -- L1 -- load, metered at both ends of L1."""
    z = overhead_line(1.0) if z is None else z
    load_va = np.array([1.2e6 + 0.4e6j, 0.9e6 + 0.35e6j, 1.0e6 + 0.3e6j]) if load_va is None else load_va
    return FeederModel(
        buses=("sub", "load"),
        source_bus="sub",
        v_base=v_ln,
        s_base=6e6,
        branches=(LineBranch("L1", "sub", "load", z),),
        loads=(Load("load", load_va),),
        meters=(Meter("m_sub", "sub", "L1", "from"), Meter("m_load", "load", "L1", "to")),
    )


def transformer_pair(z_abc: np.ndarray | None = None, n_t: float = 12470.0 / 2400.0, load_va=None) -> FeederModel:
    """Source -- T1 (delta / grounded wye) -- lv, metered on both sides."""
    z_base_low = 2400.0**2 / (6e6 / 3)
    z_abc = np.diag([0.012 + 0.06j, 0.011 + 0.058j, 0.013 + 0.062j]) * z_base_low if z_abc is None else z_abc
    load_va = np.array([1.5e6 + 0.5e6j, 1.1e6 + 0.4e6j, 1.3e6 + 0.3e6j]) if load_va is None else load_va
    return FeederModel(
        buses=("hv", "lv"),
        source_bus="hv",
        v_base=V_LN_12KV,
        s_base=6e6,
        branches=(TransformerBranch("T1", "hv", "lv", n_t, z_abc),),
        loads=(Load("lv", load_va),),
        meters=(Meter("m_hv", "hv", "T1", "from"), Meter("m_lv", "lv", "T1", "to")),
    )


def four_bus_feeder() -> FeederModel:
    """sub -- n1 -- n2 -- n3 with unbalanced loads; uPMUs at sub and n3."""
    return FeederModel(
        buses=("sub", "n1", "n2", "n3"),
        source_bus="sub",
        v_base=V_LN_12KV,
        s_base=3e6,
        branches=(
            LineBranch("L1", "sub", "n1", overhead_line(0.8)),
            LineBranch("L2", "n1", "n2", overhead_line(0.6)),
            LineBranch("L3", "n2", "n3", overhead_line(0.5)),
        ),
        loads=(
            Load("n1", [4.0e5 + 1.5e5j, 3.0e5 + 1.0e5j, 3.5e5 + 1.2e5j]),
            Load("n2", [2.5e5 + 0.8e5j, 3.5e5 + 1.4e5j, 2.0e5 + 0.6e5j]),
            Load("n3", [3.0e5 + 1.0e5j, 2.0e5 + 0.7e5j, 3.5e5 + 1.5e5j]),
        ),
        meters=(Meter("m_sub", "sub"), Meter("m_n3", "n3")),
    )


def switched_six_bus_feeder() -> FeederModel:
    """Six buses; b5 can be fed from b4 (S1, closed), b3 (S2) or b2 (S3).

    sub -- b1 -- b2 -- b3 and b1 -- b4 are lines. Every bus carries a uPMU;
    the substation meter reads the feeder-head injection.
    """
    return FeederModel(
        buses=("sub", "b1", "b2", "b3", "b4", "b5"),
        source_bus="sub",
        v_base=V_LN_12KV,
        s_base=3e6,
        branches=(
            LineBranch("L1", "sub", "b1", overhead_line(0.6)),
            LineBranch("L2", "b1", "b2", overhead_line(0.9)),
            LineBranch("L3", "b2", "b3", overhead_line(1.1)),
            LineBranch("L4", "b1", "b4", overhead_line(0.5)),
            SwitchBranch("S1", "b4", "b5", True),
            SwitchBranch("S2", "b3", "b5", False),
            SwitchBranch("S3", "b2", "b5", False),
        ),
        loads=(
            Load("b1", [2.0e5 + 0.6e5j, 1.5e5 + 0.5e5j, 1.8e5 + 0.4e5j]),
            Load("b2", [1.5e5 + 0.5e5j, 2.0e5 + 0.7e5j, 1.2e5 + 0.3e5j]),
            Load("b3", [1.0e5 + 0.3e5j, 1.2e5 + 0.4e5j, 1.5e5 + 0.5e5j]),
            Load("b4", [1.2e5 + 0.4e5j, 1.0e5 + 0.3e5j, 1.1e5 + 0.3e5j]),
            Load("b5", [3.0e5 + 1.0e5j, 2.6e5 + 0.9e5j, 2.8e5 + 1.0e5j]),
        ),
        meters=tuple(Meter(f"m_{b}", b) for b in ("sub", "b1", "b2", "b3", "b4", "b5")),
    )


def phase_id_feeder() -> FeederModel:
    """Six metered points: substation, three primary buses, and two buses
    behind delta / grounded-wye step-down transformers."""
    z_base_low = 2400.0**2 / (3e6 / 3)
    zt = np.diag([0.01 + 0.05j, 0.011 + 0.052j, 0.009 + 0.048j]) * z_base_low
    n_t = 12470.0 / 2400.0
    return FeederModel(
        buses=("sub", "p1", "p2", "p3", "s1", "s2"),
        source_bus="sub",
        v_base=V_LN_12KV,
        s_base=3e6,
        branches=(
            LineBranch("L1", "sub", "p1", overhead_line(1.0)),
            LineBranch("L2", "p1", "p2", overhead_line(0.8)),
            LineBranch("L3", "p1", "p3", overhead_line(1.1)),
            TransformerBranch("T1", "p2", "s1", n_t, zt),
            TransformerBranch("T2", "p3", "s2", n_t, zt * 1.1),
        ),
        loads=(
            Load("p1", [3.0e5 + 1.0e5j, 2.0e5 + 0.8e5j, 2.5e5 + 0.9e5j]),
            Load("p2", [2.0e5 + 0.7e5j, 2.5e5 + 0.9e5j, 1.5e5 + 0.5e5j]),
            Load("p3", [1.5e5 + 0.5e5j, 1.8e5 + 0.6e5j, 2.2e5 + 0.8e5j]),
            Load("s1", [2.5e5 + 0.8e5j, 2.0e5 + 0.6e5j, 3.0e5 + 1.0e5j]),
            Load("s2", [2.0e5 + 0.6e5j, 2.8e5 + 0.9e5j, 1.6e5 + 0.5e5j]),
        ),
        meters=tuple(Meter(f"m_{b}", b) for b in ("sub", "p1", "p2", "p3", "s1", "s2")),
    )


def fault_feeder() -> FeederModel:
    """Branched feeder: trunk sub-b1-b2-b3 with laterals b1-b4-b5 and b2-b6.

    uPMUs at the substation (feeder-head current) and at the three
    lateral / trunk ends.
    """
    return FeederModel(
        buses=("sub", "b1", "b2", "b3", "b4", "b5", "b6"),
        source_bus="sub",
        v_base=V_LN_12KV,
        s_base=3e6,
        branches=(
            LineBranch("L1", "sub", "b1", overhead_line(1.0)),
            LineBranch("L2", "b1", "b2", overhead_line(0.8)),
            LineBranch("L3", "b2", "b3", overhead_line(1.2)),
            LineBranch("L4", "b1", "b4", overhead_line(0.9)),
            LineBranch("L5", "b4", "b5", overhead_line(0.7)),
            LineBranch("L6", "b2", "b6", overhead_line(1.0)),
        ),
        loads=(
            Load("b1", [1.5e5 + 0.5e5j, 1.2e5 + 0.4e5j, 1.4e5 + 0.4e5j]),
            Load("b2", [1.0e5 + 0.3e5j, 1.3e5 + 0.4e5j, 0.9e5 + 0.3e5j]),
            Load("b3", [2.0e5 + 0.7e5j, 1.6e5 + 0.5e5j, 1.8e5 + 0.6e5j]),
            Load("b4", [0.8e5 + 0.2e5j, 1.0e5 + 0.3e5j, 0.9e5 + 0.3e5j]),
            Load("b5", [1.4e5 + 0.4e5j, 1.2e5 + 0.4e5j, 1.5e5 + 0.5e5j]),
            Load("b6", [1.1e5 + 0.3e5j, 0.9e5 + 0.3e5j, 1.2e5 + 0.4e5j]),
        ),
        meters=(
            Meter("m_sub", "sub", "L1", "from"),
            Meter("m_b3", "b3"),
            Meter("m_b5", "b5"),
            Meter("m_b6", "b6"),
        ),
    )
