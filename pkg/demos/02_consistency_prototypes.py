"""Prompt-conditioned feature enhancement and the consistency squeeze.

A support video rides through the transformer twice: once stacked on its
class prompt token (the real pass) and once on a keyed random stand-in
(the fake pass). The consistency loss pulls the two enhanced features
together; a few optimizer steps here show the gap closing while the
class prototype stays the plain mean of the real support features.
"""

import numpy as np

from cpm2c import cpm
from cpm2c.nn import Adam
from cpm2c.tensor import Tape, Tensor, backward

FRAMES, DIM, SHOT = 8, 32, 3

rng = np.random.default_rng(0)
branch = cpm.CpmBranch(seq_len=FRAMES + 1, dim=DIM, num_heads=4, rng=rng)
params = branch.named_parameters("branch")
print(f"branch parameters   {len(params)} tensors, "
      f"{sum(p.size for _, p in params)} scalars")

videos = [Tensor(rng.standard_normal((FRAMES, DIM)).astype(np.float32))
          for _ in range(SHOT)]
prompt = Tensor(rng.standard_normal(DIM).astype(np.float32))
fakes = [cpm.fake_token(DIM, 0, 0, v, "normal") for v in range(SHOT)]
print(f"fake token keyed by {fakes[0].provenance}")

opt = Adam(params, lr=1e-3)
for step in range(41):
    with Tape():
        reals = [cpm.feature_enhance(branch, vid, prompt, train=True)
                 for vid in videos]
        stand_ins = [cpm.query_feature(branch, vid, fake, train=True)
                     for vid, fake in zip(videos, fakes)]
        loss = cpm.consistency_loss(reals, stand_ins, reduction="mean")
    backward(loss)
    if step % 10 == 0:
        proto = cpm.build_prototype(reals)
        print(f"step {step:>3}  consistency {float(loss.data):8.4f}  "
              f"prototype norm {float(np.linalg.norm(proto.data)):7.2f}")
    opt.step()
    opt.zero_grad()

# the prototype really is the mean of the real-pass features
proto = cpm.build_prototype(reals)
mean = np.mean([r.data for r in reals], axis=0)
print(f"prototype == mean   {bool(np.allclose(proto.data, mean, atol=1e-6))}")
