"""Joint optic disc/cup segmentation and glaucoma grading from fundus + OCT."""

__version__ = "0.1.0"
