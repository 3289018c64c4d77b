"""Neural signed-distance surface reconstruction by volume rendering.

Subpackages are plain modules; import what you need, e.g.::

    from sdfrender import transparency, sampling, renderer
"""

__version__ = "0.1.0"
