"""corrlab: two-view correspondence outlier rejection with contextual attention
and cross-stage graph consensus."""

__version__ = "0.1.0"
