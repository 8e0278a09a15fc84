#!/usr/bin/env python3
"""
Layer-aggregation fake-image detection toolkit
"""

from pathlib import Path

from setuptools import find_packages, setup

HERE = Path(__file__).parent


def read_requirements(name):
    lines = (HERE / name).read_text().splitlines()
    return [line.split("#")[0].strip() for line in lines if line.split("#")[0].strip()]


setup(
    name="laf-detect",
    version="1.0.0",
    description="Layer-aggregation fake-image detection: synthetic data, training, cross-family evaluation",
    long_description=(HERE / "README.md").read_text(),
    long_description_content_type="text/markdown",
    packages=find_packages(include=["laf", "laf.*"]),
    python_requires=">=3.9",
    install_requires=read_requirements("requirements.txt"),
    extras_require={"dev": ["pytest>=7.0.0", "scikit-learn>=1.2.0", "black>=22.0.0", "flake8>=5.0.0"]},
    entry_points={"console_scripts": ["laf=laf.cli:main"]},
    include_package_data=True,
    data_files=[("fixtures", ["fixtures/paper_tables.json"]), ("config", ["config/settings.json"])],
)
