import numpy as np
import pytest

import faircda.autodiff as ad
from faircda.census import generate_census_table
from faircda.data import LabeledBatch, SynthSpec, fit_encode, synth_generate
from faircda.disentangle import FairCdaArch, FairCdaNetwork


@pytest.fixture(scope="session")
def small_census():
    """8k-row census-style dataset, encoded; shared across test modules."""
    table = generate_census_table(8000, seed=7)
    return fit_encode(table, seed=13)


def checkable_case(seed, n=4, input_dim=5, hidden=7, branch=6, margin=2e-3):
    """Random tiny network and batch safe for finite-difference checks.

    The loss surface is only piecewise smooth (relu masks, bce clamp), so
    biases are jittered until every preactivation clears the kinks by a
    margin much larger than the probe step.
    """
    rng = np.random.default_rng(seed)
    batch = LabeledBatch(x=rng.standard_normal((n, input_dim)),
                         y=(rng.random(n) < 0.5).astype(float),
                         a=(rng.random(n) < 0.5).astype(float))
    for attempt in range(50):
        net = FairCdaNetwork.build(FairCdaArch(input_dim, hidden, branch),
                                   seed=seed * 1000 + attempt)
        jit = np.random.default_rng(seed * 777 + attempt)
        for name in net.store.names():
            if name.endswith(".b"):
                t = net.store.tensor(name)
                t.data = t.data + jit.uniform(-0.3, 0.3, t.data.shape)
        pres = []
        x = ad.constant(batch.x)
        h0 = ad.add(ad.matmul(x, net.store.tensor("h.0.W")), net.store.tensor("h.0.b"))
        pres.append(h0.data)
        z_in = ad.add(ad.matmul(ad.relu(h0), net.store.tensor("h.1.W")),
                      net.store.tensor("h.1.b"))
        pres.append(z_in.data)
        z = ad.relu(z_in)
        for br in ("h_y.0", "h_a.0"):
            pre = ad.add(ad.matmul(z, net.store.tensor(br + ".W")),
                         net.store.tensor(br + ".b"))
            pres.append(pre.data)
        if min(np.abs(p).min() for p in pres) > margin:
            return net, batch
    raise AssertionError("could not build a kink-safe network")


@pytest.fixture(scope="session")
def synth_spec():
    return SynthSpec(n=3000, dim=6, shift=3.0, corr=0.2, label_sep=1.2)


@pytest.fixture(scope="session")
def synth_ds(synth_spec):
    return synth_generate(synth_spec, seed=5)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))
