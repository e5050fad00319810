"""
Thresholded first-neighbor clustering
=====================================

Plain first-neighbor clustering keeps merging until everything collapses
into a handful of groups.  Capping the link distance at ``d`` stops the
recursion once clusters are far apart, which is what pseudo labels need.
"""

import numpy as np

from feduda.clustering import Partition, cfinch, finch, pairwise_fscore
from feduda.synth import DomainSpec, generate_domain

# a small labelled domain, used here only to score the partitions
ds = generate_domain(DomainSpec("demo", 30, 8, 16, intra_noise_sigma=0.3), seed=0)
truth = Partition.from_labels(ds.identities)

# the unconstrained hierarchy
for level, part in enumerate(finch(ds.features)):
    f = pairwise_fscore(part, truth).f_score
    print(f"finch level {level}: {part.num_clusters:3d} clusters, F {f:.3f}")

# thresholded variant across a few cosine-distance caps
for d in (0.05, 0.2, 0.35, 0.6, np.inf):
    part = cfinch(ds.features, d)
    print(f"cfinch d={d:<5}: {part.num_clusters:3d} clusters, F {pairwise_fscore(part, truth).f_score:.3f}")
