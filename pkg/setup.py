"""A setuptools based setup module.

See:
https://packaging.python.org/en/latest/distributing.html
"""

from setuptools import setup, find_packages
from os import path
from io import open

here = path.abspath(path.dirname(__file__))

# Get the long description from the README file
with open(path.join(here, 'README.md'), encoding='utf-8') as f:
    long_description = f.read()

setup(
    name='bitfault',
    version='0.1.0',
    description='Bit error robustness for quantized neural networks: training, bit error simulation and attacks',
    long_description=long_description,
    long_description_content_type='text/markdown',

    author='bitfault developers',

    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
    ],
    keywords='quantization bit errors fault injection robustness neural networks',

    packages=find_packages(exclude=['docs', 'tests', '.venv']),
    # The small synthetic profiled map used by tests and examples
    package_data={'bitfault': ['data/chip2_like/*']},

    python_requires='>=3.8',
    install_requires=['numpy>=1.20', 'attrs>=21.3', 'filefetcher'],

    # Optional dependency groups, eg:
    #   $ pip install bitfault[test]
    extras_require={
        'test': ['coverage', 'pytest', 'pytest-flake8', 'pytest-mypy'],
        'perf': ['fastnumbers'],
    },

    entry_points={
        'console_scripts': [
            'bitfault=bitfault.bin.bitfault_cli:run_cli',
            'bitfault-assets=bitfault.assets:main'
        ],
    },
)
