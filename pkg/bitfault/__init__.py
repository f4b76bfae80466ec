"""
bitfault: bit error injection, robust training and evaluation for fixed-point quantized networks
"""
__version__ = '0.1.0'

__all__ = ['__version__']
