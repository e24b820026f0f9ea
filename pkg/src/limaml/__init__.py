"""Meta-learned per-task embeddings for click-through models.

Submodules are imported on demand; importing the package itself pulls in
nothing heavy, so the serving path stays free of the autodiff code.
"""

__version__ = "0.1.0"
