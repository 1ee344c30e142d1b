"""
depthflow - Self-supervised joint depth and optical-flow estimation.
"""

__version__ = "0.1.0"
__author__ = "depthflow contributors"
