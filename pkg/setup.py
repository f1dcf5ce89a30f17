#!/usr/bin/env python3
"""
Setup configuration for the quantum heat engine package
"""

from setuptools import setup, find_packages

setup(
    name="quantum-heat-engine",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    py_modules=["main"],
    python_requires=">=3.10",
    install_requires=[
        "numpy>=2.0",
        "scipy>=1.13",
        "gymnasium>=1.0",
        "pandas>=2.2",
        "pydantic>=2.9",
        "PyYAML>=6.0",
        "python-dotenv>=1.0",
    ],
    entry_points={"console_scripts": ["qhe=main:main"]},
)
