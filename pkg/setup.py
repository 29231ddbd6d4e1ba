import pathlib
from setuptools import setup

HERE = pathlib.Path(__file__).parent
README = (HERE / "README.md").read_text()
ABOUT = {}
with open((HERE / "walklab" / "version.py")) as f:
    exec(f.read(), ABOUT)

setup(
    name="walklab",
    version=ABOUT['__version__'],
    description="Conditioned random walk and BPRE limit-law verification lab.",
    long_description=README,
    long_description_content_type="text/markdown",
    author="ScooterTeam",
    python_requires=">=3.10, <4",
    license="CC BY-NC-SA 4.0",
    packages=["walklab"],
    install_requires=["numpy>=1.26", "pandas>=2.1", "scipy>=1.11", "tqdm>=4.67"],
    keywords=["random walk", "stable law", "meander", "branching process"],
    entry_points={"console_scripts": ["walklab=walklab.__main__:main"]}
)
