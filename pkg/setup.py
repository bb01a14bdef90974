import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="latent-augment",
    version="0.1.0",
    description="GAN-inversion data augmentation (style-mixing translation and latent interpolation) for image classifiers",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    install_requires=[
        "numpy",
        "scipy",
        "multiprocess",
        "pillow",
        "opencv-python",
        "torch",
        "scikit-learn",
    ],
    extras_require={
        "tests": ["pytest"],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: GNU General Public License v3 (GPL-3)",
        "Operating System :: OS Independent",
    ],
    entry_points={
        "console_scripts": [
            "latentaug=latentaug.cli:main",
        ]
    },
    python_requires=">=3.8",
)
