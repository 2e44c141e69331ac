//! CSV emission. Every file starts with the header given by the row type's
//! field names; floats are written in shortest round-trip form.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::CliResult;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    write_rows(csv::Writer::from_path(path)?, rows)
}

pub fn print_csv<T: Serialize>(rows: &[T]) -> CliResult<()> {
    write_rows(csv::Writer::from_writer(std::io::stdout().lock()), rows)
}

fn write_rows<W: Write, T: Serialize>(mut w: csv::Writer<W>, rows: &[T]) -> CliResult<()> {
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
