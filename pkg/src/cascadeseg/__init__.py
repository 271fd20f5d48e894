"""Desk-scale class-incremental segmentation laboratory.

A dual-phase continual segmenter (per-class existence routers + per-class
binary segmentation heads over a frozen shared backbone, under strict
parameter isolation) together with a numerical lab that verifies the
second-order forgetting theory behind it on deterministic synthetic
benchmarks.
"""

__version__ = "0.1.0"
