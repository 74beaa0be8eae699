#!/usr/bin/env python3

import sys

from setuptools import find_packages, setup

if sys.version_info < (3, 8):
    print("vipsim requires Python 3.8 or above.")
    sys.exit(1)


# Loads _version.py module without importing the whole package.
def get_version(package_name):
    import os
    from importlib.util import module_from_spec, spec_from_file_location

    spec = spec_from_file_location("version", os.path.join(package_name, "_version.py"))
    module = module_from_spec(spec)
    spec.loader.exec_module(module)
    return module.__version__


version = get_version("vipsim")


install_requires = [
    "numpy",
    "scipy",
    "sortedcontainers >= 2.0",
    "atomicwrites",
    "PyYAML",
]

extras_require = {
    "parallel": ["distributed", "ipyparallel"],
}


setup(
    name="vipsim",
    description="Monte Carlo simulation and limit setting for CCD searches of Pauli-forbidden X-rays",
    version=version,
    python_requires=">=3.8",
    author="vipsim authors",
    license="BSD",
    classifiers=[
        "Development Status :: 4 - Beta",
        "License :: OSI Approved :: BSD License",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Physics",
        "Programming Language :: Python :: 3.8",
    ],
    packages=find_packages("."),
    package_data={"vipsim": ["data/*.yaml", "data/validation/*.yaml"]},
    install_requires=install_requires,
    extras_require=extras_require,
    entry_points={"console_scripts": ["vipsim = vipsim.cli:main"]},
)
