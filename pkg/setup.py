"""Setup file for filmseg."""

from setuptools import setup, find_packages

setup(
    name="filmseg",
    version="0.1.0",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    install_requires=[
        "click>=8.0.0",
        "numpy>=1.22",
        "PyYAML>=6.0",
        "scipy>=1.8",
        "tabulate>=0.8.0",
        "tqdm>=4.60"
    ],
    extras_require={
        "test": ["pytest>=7.0.0", "hypothesis>=6.0"]
    },
    entry_points={
        "console_scripts": [
            "filmseg=filmseg.cli:cli"
        ]
    },
    python_requires=">=3.8",
    description="Time-conditioned (FiLM) 3D U-Net segmentation of DCE-MRI studies",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    keywords="dce-mri, segmentation, u-net, film, medical imaging",
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
)
