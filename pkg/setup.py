import os
from pathlib import Path

from setuptools import setup, find_packages

if __name__ == "__main__":
    with Path(Path(__file__).parent, "README.md").open(encoding="utf-8") as file:
        long_description = file.read()

    def _read_reqs(relpath):
        fullpath = os.path.join(os.path.dirname(__file__), relpath)
        with open(fullpath) as f:
            return [
                s.strip()
                for s in f.readlines()
                if (s.strip() and not s.startswith("#"))
            ]

    REQUIREMENTS = _read_reqs("requirements.txt")

    setup(
        name="mcptest",
        packages=find_packages(include=["mcptest*"]),
        include_package_data=True,
        version="0.1.0",
        license="Apache 2.0",
        description="mcptest: multiple-comparison evaluation of retrieval systems with simulated and real TREC data.",
        long_description=long_description,
        long_description_content_type="text/markdown",
        data_files=[(".", ["README.md"])],
        keywords=[
            "information retrieval",
            "evaluation",
            "significance testing",
            "multiple comparisons",
            "false discovery rate",
            "simulation",
        ],
        install_requires=REQUIREMENTS,
        extras_require={"dev": ["pytest", "hypothesis"]},
        entry_points={"console_scripts": ["mcptest=mcptest.main:main"]},
        classifiers=[
            "Development Status :: 4 - Beta",
            "Intended Audience :: Science/Research",
            "Topic :: Scientific/Engineering :: Information Analysis",
            "Programming Language :: Python :: 3.10",
        ],
    )
