"""The synthetic task family that stands in for speech batches.

A language is a set of unit-norm class centroids; a domain views them
through its own rotation, class prior and noise. Samples are frame
sequences labeled with the generating tokens, so a per-frame classifier
plus edit-distance scoring exercises the whole evaluation stack.
"""

import numpy as np

from clbench.metrics import combine, mer
from clbench.taskgen import bayes_decode, gen_batch, gen_domain, gen_language

spec = gen_language("ta", master_seed=3)
print(f"language spec: vocab={spec.vocab_size}, feature_dim={spec.feature_dim}")
print(f"centroid row norms: {np.linalg.norm(spec.centroids, axis=1)[:4]} ...")

calm = gen_domain(spec, "district-01", shift_strength=0.0, noise_sigma=0.0)
shifted = gen_domain(spec, "district-02", shift_strength=0.8, noise_sigma=0.0)
print(f"\nshift 0.0 rotation == identity: {np.allclose(calm.rotation, np.eye(16))}")
print(f"shift 0.8 rotation is orthogonal: {np.allclose(shifted.rotation.T @ shifted.rotation, np.eye(16))}")

# noise-free batches are perfectly decodable: the task is solvable, so any
# residual MER later is the model's (or the strategy's) fault
samples = gen_batch(shifted, n=50, seed=1)
scores = [
    mer(s.reference.tolist(), bayes_decode(shifted, s.features).tolist()) for s in samples
]
print(f"\nnoise-free nearest-centroid MER over 50 samples: {combine(scores).mer}")

print("\nBayes frame-error rate vs noise level:")
for sigma in (0.1, 0.3, 0.6, 1.0):
    noisy = gen_domain(spec, "district-03", shift_strength=0.5, noise_sigma=sigma)
    wrong = total = 0
    for s in gen_batch(noisy, n=200, seed=2):
        wrong += int((bayes_decode(noisy, s.features) != s.reference).sum())
        total += len(s.reference)
    print(f"  sigma={sigma:.1f}  frame errors {wrong/total:6.1%}")

# samples are addressable individually: sample i of a batch never depends
# on which other samples were generated
from clbench.taskgen import gen_sample

batch = gen_batch(shifted, n=10, seed=5)
solo = gen_sample(shifted, seed=5, index=7)
print(f"\nrandom access reproducibility: {np.array_equal(batch[7].features, solo.features)}")
