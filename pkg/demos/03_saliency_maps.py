"""
Saliency maps for a snippet pair
================================

Two transparency techniques on an embedding network:

  * pixel-wise: smoothed input gradients of the distance to a white page,
  * decomposition: the cosine similarity of a pair split over feature-map
    locations, viewable as a whole (overall map) or from one chosen point.

The model here is untrained (fresh weights) so the maps are structured
noise; swap in a trained ``.gscm`` file to reproduce meaningful overlays.
"""

import numpy as np

from graphoscope import corpus, nets, saliency

pages = corpus.synth_generate(4, 2, page_size=256, global_seed=9)
snips = list(corpus.extract_snippets(pages[0], 64, mode="grid"))
q, r = snips[0], snips[1]

net = nets.build_network(nets.ModelConfig(depth_preset="tiny", base_channels=8,
                                          embedding_dim=16, input_size=64,
                                          seed=0))

# pixel-wise: average gradients over 4 randomly white-masked variants
pix = saliency.pixelwise_saliency(net, q, n=4, p=0.1, seed=0)
print(f"pixel-wise map for {q.snippet_id}: range "
      f"[{pix.values.min():.3f}, {pix.values.max():.3f}], "
      f"degenerate={pix.degenerate}")

# overall maps: where does each snippet contribute to the pair similarity?
mq, mr, s = saliency.overall_saliency_pair(net, q, r)
print(f"pair similarity S = {s:.4f}")
print(f"reconstruction: sum(coarse)/z = "
      f"{np.sum(saliency.decomposition_fields(net, q, r)[1].coarse) / mq.normalizer:.4f}")

# point-specific: pick a pixel of q, see the matching regions of r
point = (20, 36)
pm = saliency.point_specific_map(net, q, r, point)
print(f"point {point} of {q.snippet_id} falls in coarse cell {pm.coarse_cell}; "
      f"map over {r.snippet_id} peaks at "
      f"{np.unravel_index(np.argmax(pm.values), pm.values.shape)}")

saliency.save_map(pix, "/tmp/demo_pixelwise.png")
print("saved /tmp/demo_pixelwise.png (+ .json sidecar)")
