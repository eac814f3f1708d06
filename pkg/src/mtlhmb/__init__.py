"""Two-step multi-task learning for multi-source data with block-wise missing sources.

Step 1 (``hbi``) imputes each missing source block from the anchoring source;
step 2 (``mtl``) fits a network with a shared and a task-specific pathway.
"""

__version__ = "0.1.0"
