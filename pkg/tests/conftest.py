import numpy as np
import pytest

from lbse.grid import build_admittance, load_case, parse_case

TOY2 = """\
function mpc = toy2
mpc.baseMVA = 10;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	12.66	1	1.1	0.9;
	2	1	0.5	0.2	0	0	1	1	0	12.66	1	1.1	0.9;
];
mpc.branch = [
	1	2	0.01	0.03	0.002	0	0	0	0	0	1	-360	360;
];
"""

# three buses in a loop, with line charging and a bus shunt
TOY3 = """\
function mpc = toy3
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	110	1	1.1	0.9;
	2	1	10	5	0	0	1	1	0	110	1	1.1	0.9;
	3	1	20	8	1.5	-2.0	1	1	0	110	1	1.1	0.9;
];
mpc.branch = [
	1	2	0.02	0.06	0.03	0	0	0	0	0	1	-360	360;
	2	3	0.01	0.04	0.02	0	0	0	0	0	1	-360	360;
	1	3	0.03	0.08	0.00	0	0	0	0	0	1	-360	360;
];
"""


@pytest.fixture(scope="session")
def net33():
    return load_case()


@pytest.fixture(scope="session")
def adm33(net33):
    return build_admittance(net33)


@pytest.fixture(scope="session")
def toy2():
    net = parse_case(TOY2)
    return net, build_admittance(net)


@pytest.fixture(scope="session")
def toy3():
    net = parse_case(TOY3)
    return net, build_admittance(net)


def random_state(rng, n, slack=0, dv=0.05, dth=0.26):
    from lbse.measurements import StateVector
    v = rng.uniform(1 - dv, 1 + dv, n)
    th = rng.uniform(-dth, dth, n)
    th[slack] = 0.0
    return StateVector(v, th)
