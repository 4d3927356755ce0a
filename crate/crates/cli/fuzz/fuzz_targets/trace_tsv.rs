#![no_main]

use libfuzzer_sys::fuzz_target;
use ricci_lab_cli::tables::Table;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(table) = Table::parse(text) {
        // Rendering an accepted table and parsing it again is lossless.
        let again = Table::parse(&table.render()).expect("rendered table parses");
        assert_eq!(again.kind, table.kind);
        assert_eq!(again.columns, table.columns);
        assert_eq!(again.rows.len(), table.rows.len());
        for (a, b) in again.rows.iter().zip(&table.rows) {
            for (x, y) in a.iter().zip(b) {
                assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
            }
        }
    }
});
