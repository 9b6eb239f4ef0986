import os
import sys

import numpy as np
from hypothesis import HealthCheck, settings

from quasiroute.quasimetric import DistanceMatrix
from quasiroute.variants import Instance, make_spec

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

sys.path.insert(0, os.path.dirname(__file__))

# closure of [[0,5,2],[9,0,4],[1,7,0]], computed by hand
CLOSURE_3 = np.array([[0.0, 5.0, 2.0], [5.0, 0.0, 4.0], [1.0, 6.0, 0.0]])


def make_instance(name, d, **attrs):
    """Hand-built instance; unspecified attributes are zero."""
    spec = make_spec(name, **attrs.pop("spec_overrides", {}))
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    zeros = np.zeros(n)
    fields = dict(demand=zeros, prize=zeros, penalty=zeros, tw_early=zeros, tw_late=zeros, service=zeros)
    fields.update({k: np.asarray(v, dtype=np.float64) for k, v in attrs.items() if k in fields})
    return Instance(
        spec=spec, dist=DistanceMatrix(d, is_symmetric=bool(np.array_equal(d, d.T))), coords=None,
        depots=tuple(attrs.get("depots", range(spec.n_depots))),
        pd_pairs=tuple(attrs.get("pd_pairs", ())), seed=None, **fields,
    )
