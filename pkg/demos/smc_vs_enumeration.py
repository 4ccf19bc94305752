"""Approximate inference for the model whose relations feed the recurrence.

When relations change the hidden state, the likelihood no longer factors by
slot and exact inference enumerates Z^T sequences.  Sequential Monte Carlo
estimates the same log-marginal; its error shrinks as particles grow.

    python3 demos/smc_vs_enumeration.py
"""

import numpy as np

from drlm.inference import enumerate_exact_model2, smc_log_marginal, smc_sample, smc_slot_marginals
from drlm.model import DRLM, ModelDims, param_shapes

rng = np.random.default_rng(0)
dims = ModelDims(V=10, K=4, H=4, Z=3)
params = {name: rng.normal(size=shape) for name, shape in param_shapes(dims, "drlm-model2").items()}
model = DRLM(dims, "drlm-model2", params)

# four sentences of random words, each ending with the end-of-sentence id 3
sentences = [[int(w) for w in rng.integers(4, 10, size=n)] + [3] for n in (3, 2, 4, 2)]
exact, marginals = enumerate_exact_model2(model, sentences)
print(f"exact log p(y) over {dims.Z ** len(sentences)} sequences: {exact:.5f}")

for N in (10, 100, 1000):
    estimates = np.array([smc_log_marginal(smc_sample(model, sentences, N, seed=s)) for s in range(20)])
    print(f"N={N:5d}  mean {estimates.mean():.5f}  sd {estimates.std(ddof=1):.5f}  bias {estimates.mean() - exact:+.5f}")

ps = smc_sample(model, sentences, 5000, proposal="uniform", seed=1)
print("\nslot marginals, exact vs 5000 particles with a uniform proposal:")
for t, (est, ref) in enumerate(zip(smc_slot_marginals(ps, dims.Z), marginals)):
    print(f"  slot {t}: exact {np.round(ref.probs, 3)}  smc {np.round(est, 3)}")
