"""
pyeiph: hemosiderophage grading and total hemosiderin scores on whole-slide images
"""
__version__ = "0.1.0"
