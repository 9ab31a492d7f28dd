from setuptools import setup, find_packages

with open("requirements.txt") as f:
    requirements = [line.strip() for line in f if line.strip() and not line.startswith("#")]

setup(
    name="hierflow",
    version="0.1.0",
    packages=find_packages(include=["lib", "components"]),
    py_modules=["hierflow", "hierflow_trainer"],
    package_data={"": ["configs/*.yml"]},
    install_requires=[r for r in requirements if r not in ["mock", "pytest"]],
    description="hierflow - Hierarchical video-to-speech with conditional flow matching",
)
