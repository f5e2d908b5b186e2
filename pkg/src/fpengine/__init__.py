"""fpengine: a closed-loop data engine for model improvement.

The engine evaluates a model on a dev set, clusters persistent failures
into prototypes, uses the prototypes' visual anchors to retrieve new
samples from a large embedding pool, routes them through entropy-guided
human-in-the-loop annotation, quality-filters the results, and exports
training sets for an external trainer. All model / oracle / trainer /
embedder calls sit behind pluggable client interfaces, so the full loop
runs deterministically with the bundled simulation kit.
"""

__version__ = "0.1.0"
