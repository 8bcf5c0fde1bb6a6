import os
import tempfile


# reuse the deterministic (and expensive) truth trajectories across sessions
os.environ.setdefault(
    "MMDA_TRUTH_CACHE", os.path.join(tempfile.gettempdir(), "mmda-truth-cache")
)
