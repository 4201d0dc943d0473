try:
    from setuptools import setup
    from setuptools import find_packages
    packages = find_packages(exclude=('tests', 'tests.*', 'examples', 'examples.*'))
except ImportError:
    from distutils.core import setup
    packages = ['chmoe', 'chmoe.tensor', 'chmoe.attention']

setup(
    name='chmoe',
    description='Channel mixture-of-experts attention for multi-channel vision transformers, with a numpy autodiff '
                'substrate, closed-form cost model and synthetic training harness.',
    version='0.3.0',
    python_requires='>=3.8',
    packages=packages,
    install_requires=[
        'numpy>=1.17',
        'sortedcontainers>=2.0',
    ],
    extras_require={
        "test": ["pytest>=6.0"],
    },
    entry_points={
        "console_scripts": ["chmoe = chmoe.cli:main"],
    },
)
