"""
R-JEPA 循环学习引擎
"""

__version__ = "1.0.0"
__author__ = "RJepa"
