"""
Backbone averaging with a proximal source client
================================================

Two sanity checks of the federated loop on tiny models, then the effect of
the proximal weight on how far the source client drifts in one round.
"""

from feduda.federation import FederationConfig, make_client, run_federation, run_partial_averaging
from feduda.model import init_backbone, new_model
from feduda.synth import DomainSpec, generate_domain

DIMS = [6, 8, 4]


def clients():
    src = generate_domain(DomainSpec("source", 6, 5, 6, intra_noise_sigma=0.4), 0)
    tgt = generate_domain(DomainSpec("target", 4, 5, 6, intra_noise_sigma=0.4, shift_rotation_seed=3), 1)
    return [make_client("source", "source", src, new_model(DIMS, 6, 0), 10),
            make_client("target-0", "target", tgt, new_model(DIMS, 4, 1), 11)]


start = init_backbone(DIMS, 7)

# with lam = 0 the loop is exactly plain partial averaging
_, traces = run_federation(FederationConfig(3, 5, 0.0, 0.05, 4, clients()), start)
plain = run_partial_averaging(clients(), start, 3, 5, 0.05, 4)
print("lam=0 equals plain averaging:", all(t.backbone.equals(p) for t, p in zip(traces, plain)))

# larger lam keeps the source client closer to the round-start backbone
for lam in (0.0, 0.5, 2.0, 10.0):
    _, traces = run_federation(FederationConfig(1, 10, lam, 0.1, 4, clients()), start)
    print(f"lam={lam:<5} source drift {traces[0].drift['source']:.4f}")
