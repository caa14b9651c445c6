"""Semi-supervised two-stage object detection with a mean teacher.

Modules: ``core`` (boxes, matching), ``data`` (synthetic shapes, COCO I/O,
splits), ``augment`` (weak/strong views), ``detector`` (functional toy
detector), ``losses``, ``pseudolabel``, ``ema``, ``trainer``, ``evaluation``
and ``cli``.
"""

__version__ = "0.1.0"
