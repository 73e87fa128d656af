"""Evaluation toolkit for interactive video object segmentation.

The server side simulates an annotator that draws corrective scribbles and
scores predictions against time; the client side holds an SDK and a few
reference segmenters that close the loop.
"""

__version__ = "0.1.0"
